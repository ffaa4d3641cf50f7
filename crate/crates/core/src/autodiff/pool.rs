use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{accumulate, Op, Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Window reduction for stride-1, size-3 pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Avg,
    Max,
}

const RADIUS: usize = 1;

/// Calls `f(out_index, window_indices)` for every output position of a
/// plane, with out-of-bounds taps dropped.
fn for_each_window(dims: [usize; 2], rank: usize, mut f: impl FnMut(usize, &[usize])) {
    let [h, w] = dims;
    let (rh, rw) = if rank == 1 { (RADIUS, 0) } else { (RADIUS, RADIUS) };
    let mut win = Vec::with_capacity(9);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(rh), (y + rh).min(h - 1));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(rw), (x + rw).min(w - 1));
            win.clear();
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    win.push(yy * w + xx);
                }
            }
            f(y * w + x, &win);
        }
    }
}

impl<T: Real> Tape<T> {
    /// Size-3, stride-1 pooling with "same" output size. Padded positions are
    /// ignored: max-pool never selects them and avg-pool divides by the count
    /// of in-bounds elements.
    pub fn pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let l = self.layout(x)?;
        let src = self.value(x).data();
        let plane = l.spatial_len();
        let mut out = vec![T::zero(); src.len()];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax = vec![0u32; src.len()];
        }
        for p in 0..l.batch * l.channels {
            let base = p * plane;
            let s = &src[base..base + plane];
            let o = &mut out[base..base + plane];
            match kind {
                PoolKind::Avg => for_each_window(l.dims, l.rank, |i, win| {
                    let total = win.iter().fold(T::zero(), |acc, &j| acc + s[j]);
                    o[i] = total / T::from_f64(win.len() as f64);
                }),
                PoolKind::Max => {
                    let am = &mut argmax[base..base + plane];
                    for_each_window(l.dims, l.rank, |i, win| {
                        // strict comparison keeps the lowest index on ties
                        let mut best = win[0];
                        for &j in &win[1..] {
                            if s[j] > s[best] {
                                best = j;
                            }
                        }
                        o[i] = s[best];
                        am[i] = best as u32;
                    });
                }
            }
        }
        let out = Tensor::new(l.shape(), out)?;
        Ok(self.push(out, Op::Pool { x, kind, argmax }))
    }

    /// Nearest-neighbour upsampling by 2 along every spatial axis.
    pub fn upsample(&mut self, x: Var) -> Result<Var> {
        let l = self.layout(x)?;
        let src = self.value(x).data();
        let [h, w] = l.dims;
        let (oh, ow) = if l.rank == 1 { (2 * h, 1) } else { (2 * h, 2 * w) };
        let out_l = l.with_dims([oh, ow]);
        let mut out = vec![T::zero(); out_l.batch * out_l.channels * oh * ow];
        for p in 0..l.batch * l.channels {
            let s = &src[p * h * w..(p + 1) * h * w];
            let o = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    let sx = if l.rank == 1 { 0 } else { x / 2 };
                    o[y * ow + x] = s[(y / 2) * w + sx];
                }
            }
        }
        let out = Tensor::new(out_l.shape(), out)?;
        Ok(self.push(out, Op::Upsample(x)))
    }
}

pub(super) fn pool_backward<T: Real>(
    tape: &Tape<T>,
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    x: Var,
    kind: PoolKind,
    argmax: &[u32],
) -> Result<()> {
    let l = tape.layout(x)?;
    let plane = l.spatial_len();
    accumulate(grads, x, g.len(), |d| {
        for p in 0..l.batch * l.channels {
            let base = p * plane;
            let gp = &g[base..base + plane];
            let dp = &mut d[base..base + plane];
            match kind {
                PoolKind::Max => {
                    for (i, &gv) in gp.iter().enumerate() {
                        let j = argmax[base + i] as usize;
                        dp[j] = dp[j] + gv;
                    }
                }
                PoolKind::Avg => for_each_window(l.dims, l.rank, |i, win| {
                    let share = gp[i] / T::from_f64(win.len() as f64);
                    for &j in win {
                        dp[j] = dp[j] + share;
                    }
                }),
            }
        }
    });
    Ok(())
}

pub(super) fn upsample_backward<T: Real>(
    tape: &Tape<T>,
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    x: Var,
) -> Result<()> {
    let l = tape.layout(x)?;
    let [h, w] = l.dims;
    let (oh, ow) = if l.rank == 1 { (2 * h, 1) } else { (2 * h, 2 * w) };
    accumulate(grads, x, l.batch * l.channels * h * w, |d| {
        for p in 0..l.batch * l.channels {
            let gp = &g[p * oh * ow..(p + 1) * oh * ow];
            let dp = &mut d[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let sx = if l.rank == 1 { 0 } else { x / 2 };
                    let k = (y / 2) * w + sx;
                    dp[k] = dp[k] + gp[y * ow + x];
                }
            }
        }
    });
    Ok(())
}
