use alloc::vec;
use alloc::vec::Vec;

use super::{accumulate, Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Layout, Real, Tensor};

/// Per-channel batch statistics observed by a training-mode norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, for running-statistic updates.
    pub var_unbiased: Vec<T>,
}

/// Iterates `(channel, contiguous spatial slice range)` over all planes.
fn planes(l: &Layout) -> impl Iterator<Item = (usize, core::ops::Range<usize>)> {
    let s = l.spatial_len();
    let c = l.channels;
    (0..l.batch * c).map(move |p| (p % c, p * s..(p + 1) * s))
}

impl<T: Real> Tape<T> {
    fn check_channel_params(&self, l: &Layout, vars: &[Var]) -> Result<()> {
        for &v in vars {
            if self.value(v).len() != l.channels {
                return Err(shape_err!(
                    "norm: per-channel parameter has {} entries for {} channels",
                    self.value(v).len(),
                    l.channels
                ));
            }
        }
        Ok(())
    }

    /// Batch normalization with statistics of the current batch.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let l = self.layout(x)?;
        self.check_channel_params(&l, &[gamma, beta])?;
        let src = self.value(x).data();
        let n = l.batch * l.spatial_len();
        let nt = T::from_f64(n as f64);
        let mut mean = vec![T::zero(); l.channels];
        for (c, r) in planes(&l) {
            mean[c] = src[r].iter().fold(mean[c], |a, &v| a + v);
        }
        mean.iter_mut().for_each(|m| *m = *m / nt);
        let mut var = vec![T::zero(); l.channels];
        for (c, r) in planes(&l) {
            let m = mean[c];
            var[c] = src[r].iter().fold(var[c], |a, &v| a + (v - m) * (v - m));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / nt + eps).sqrt()).collect();
        let var_unbiased = var
            .iter()
            .map(|&v| if n > 1 { v / T::from_f64((n - 1) as f64) } else { T::zero() })
            .collect();
        let xhat = self.normalized(&l, x, &mean, &inv_std);
        let out = self.affine(&l, &xhat, gamma, beta)?;
        let v = self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
        );
        Ok((v, BatchStats { mean, var_unbiased }))
    }

    /// Normalization with fixed (running) statistics.
    pub fn norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let l = self.layout(x)?;
        self.check_channel_params(&l, &[gamma, beta])?;
        if mean.len() != l.channels || var.len() != l.channels {
            return Err(shape_err!("norm: running statistics do not match channel count"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat = self.normalized(&l, x, mean, &inv_std);
        let out = self.affine(&l, &xhat, gamma, beta)?;
        Ok(self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
        ))
    }

    fn normalized(&self, l: &Layout, x: Var, mean: &[T], inv_std: &[T]) -> Vec<T> {
        let src = self.value(x).data();
        let mut xhat = vec![T::zero(); src.len()];
        for (c, r) in planes(l) {
            let (m, s) = (mean[c], inv_std[c]);
            for (d, &v) in xhat[r.clone()].iter_mut().zip(&src[r]) {
                *d = (v - m) * s;
            }
        }
        xhat
    }

    fn affine(&self, l: &Layout, xhat: &[T], gamma: Var, beta: Var) -> Result<Tensor<T>> {
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xhat.len()];
        for (c, r) in planes(l) {
            for (d, &v) in out[r.clone()].iter_mut().zip(&xhat[r]) {
                *d = g[c] * v + b[c];
            }
        }
        Tensor::new(l.shape(), out)
    }

    /// Soft dice loss `1 - mean_k (2 I_k + eps) / (P_k + G_k + eps)` of class
    /// probabilities against integer labels, with sums taken over the whole
    /// batch. Classes with `include[k] == false` are left out of the mean.
    pub fn soft_dice(&mut self, probs: Var, labels: &[u8], include: &[bool], eps: T) -> Result<Var> {
        let l = self.layout(probs)?;
        let s = l.spatial_len();
        if labels.len() != l.batch * s {
            return Err(shape_err!(
                "soft dice: {} labels for {} positions",
                labels.len(),
                l.batch * s
            ));
        }
        if include.len() != l.channels || !include.iter().any(|&i| i) {
            return Err(shape_err!("soft dice: class inclusion mask must cover {} classes and include one", l.channels));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= l.channels) {
            return Err(shape_err!("soft dice: label {bad} out of range for {} classes", l.channels));
        }
        let p = self.value(probs).data();
        let mut stats = vec![[T::zero(); 3]; l.channels];
        for b in 0..l.batch {
            for (k, st) in stats.iter_mut().enumerate() {
                let row = &p[(b * l.channels + k) * s..(b * l.channels + k + 1) * s];
                for (q, &pv) in row.iter().enumerate() {
                    st[1] = st[1] + pv;
                    if labels[b * s + q] as usize == k {
                        st[0] = st[0] + pv;
                        st[2] = st[2] + T::one();
                    }
                }
            }
        }
        let two = T::from_f64(2.0);
        let mut total = T::zero();
        let mut count = 0usize;
        for (st, _) in stats.iter().zip(include).filter(|(_, &inc)| inc) {
            total = total + (two * st[0] + eps) / (st[1] + st[2] + eps);
            count += 1;
        }
        let loss = T::one() - total / T::from_f64(count as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftDice {
                probs,
                labels: labels.to_vec(),
                stats,
                included: include.to_vec(),
                eps,
            },
        ))
    }
}

pub(super) fn backward<T: Real>(
    tape: &Tape<T>,
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    (x, gamma, beta): (Var, Var, Var),
    xhat: &[T],
    inv_std: &[T],
    batch_stats: bool,
) -> Result<()> {
    let l = tape.layout(x)?;
    let c = l.channels;
    let n = T::from_f64((l.batch * l.spatial_len()) as f64);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for (ch, r) in planes(&l) {
        for (&gv, &xv) in g[r.clone()].iter().zip(&xhat[r]) {
            sum_g[ch] = sum_g[ch] + gv;
            sum_gx[ch] = sum_gx[ch] + gv * xv;
        }
    }
    accumulate(grads, gamma, c, |d| {
        for (d, &v) in d.iter_mut().zip(&sum_gx) {
            *d = *d + v;
        }
    });
    accumulate(grads, beta, c, |d| {
        for (d, &v) in d.iter_mut().zip(&sum_g) {
            *d = *d + v;
        }
    });
    let gam = tape.value(gamma).data();
    accumulate(grads, x, xhat.len(), |d| {
        for (ch, r) in planes(&l) {
            let k = gam[ch] * inv_std[ch];
            if batch_stats {
                let (mg, mgx) = (sum_g[ch] / n, sum_gx[ch] / n);
                for ((d, &gv), &xv) in d[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                    *d = *d + k * (gv - mg - xv * mgx);
                }
            } else {
                for (d, &gv) in d[r.clone()].iter_mut().zip(&g[r]) {
                    *d = *d + k * gv;
                }
            }
        }
    });
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(super) fn soft_dice_backward<T: Real>(
    tape: &Tape<T>,
    grads: &mut [Option<Vec<T>>],
    g0: T,
    probs: Var,
    labels: &[u8],
    stats: &[[T; 3]],
    included: &[bool],
    eps: T,
) -> Result<()> {
    let l = tape.layout(probs)?;
    let s = l.spatial_len();
    let two = T::from_f64(2.0);
    let count = T::from_f64(included.iter().filter(|&&i| i).count() as f64);
    accumulate(grads, probs, l.batch * l.channels * s, |d| {
        for (k, st) in stats.iter().enumerate() {
            if !included[k] {
                continue;
            }
            let den = st[1] + st[2] + eps;
            let num = two * st[0] + eps;
            let scale = -g0 / (count * den * den);
            for b in 0..l.batch {
                let row = &mut d[(b * l.channels + k) * s..(b * l.channels + k + 1) * s];
                for (q, dv) in row.iter_mut().enumerate() {
                    let gk = if labels[b * s + q] as usize == k { T::one() } else { T::zero() };
                    *dv = *dv + scale * (two * gk * den - num);
                }
            }
        }
    });
    Ok(())
}
