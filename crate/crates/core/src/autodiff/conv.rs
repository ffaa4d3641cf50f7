//! Cross-correlation with zero "same" padding, lowered to a single GEMM via
//! im2col.

use alloc::vec;
use alloc::vec::Vec;

use super::{accumulate, Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Layout, Real, Tensor};

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: Layout,
    pub output: Layout,
    /// Kernel extent per spatial axis (`[k, 1]` for rank 1).
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    /// Leading zero padding per axis.
    pub pad: [usize; 2],
}

impl ConvGeometry {
    pub fn new(input: Layout, weight_shape: &[usize], stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(shape_err!("conv: stride must be positive"));
        }
        let (c_out, c_in, kernel) = match (input.rank, weight_shape) {
            (1, &[o, i, k]) => (o, i, [k, 1]),
            (2, &[o, i, kh, kw]) => {
                if kh != kw {
                    return Err(shape_err!("conv: rank-2 kernels must be square, got {kh}x{kw}"));
                }
                (o, i, [kh, kw])
            }
            _ => {
                return Err(shape_err!(
                    "conv: kernel shape {:?} does not match input spatial rank {}",
                    weight_shape,
                    input.rank
                ))
            }
        };
        if !matches!(kernel[0], 1 | 3 | 5) {
            return Err(shape_err!("conv: kernel size must be 1, 3 or 5, got {}", kernel[0]));
        }
        if c_in != input.channels {
            return Err(shape_err!(
                "conv: input has {} channels but kernel expects {}",
                input.channels,
                c_in
            ));
        }
        let stride = if input.rank == 1 { [stride, 1] } else { [stride, stride] };
        let mut dims = [0; 2];
        let mut pad = [0; 2];
        for a in 0..2 {
            let n = input.dims[a];
            let out = n.div_ceil(stride[a]);
            let total = ((out.saturating_sub(1)) * stride[a] + kernel[a]).saturating_sub(n);
            dims[a] = out;
            pad[a] = total / 2;
        }
        Ok(Self {
            input,
            output: input.with_channels(c_out).with_dims(dims),
            kernel,
            stride,
            pad,
        })
    }

    fn col_rows(&self) -> usize {
        self.input.channels * self.kernel[0] * self.kernel[1]
    }

    fn col_cols(&self) -> usize {
        self.input.batch * self.output.spatial_len()
    }
}

/// Output indices `o` in `lo..hi` whose source `o * stride + offset` lies in
/// `0..len`.
fn valid_range(out_len: usize, stride: usize, offset: isize, len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(out_len as isize) };
    let lo = lo.min(out_len as isize);
    (lo as usize, hi.max(lo) as usize)
}

/// Visits every run of in-bounds taps as `(col row, first col index, first
/// source index, run length, source step)`. Col indices within a run are
/// consecutive.
fn for_each_tap(geom: &ConvGeometry, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let ConvGeometry {
        input,
        output,
        kernel,
        stride,
        pad,
    } = *geom;
    let (ih, iw) = (input.dims[0], input.dims[1]);
    let (oh, ow) = (output.dims[0], output.dims[1]);
    let os = oh * ow;
    let is = ih * iw;
    // single-column planes: a whole kernel row is one strided run
    let columnar = iw == 1 && ow == 1;
    for ci in 0..input.channels {
        for kh in 0..kernel[0] {
            let off_h = kh as isize - pad[0] as isize;
            let (h_lo, h_hi) = valid_range(oh, stride[0], off_h, ih);
            if h_lo >= h_hi {
                continue;
            }
            for kw in 0..kernel[1] {
                let row = (ci * kernel[0] + kh) * kernel[1] + kw;
                let off_w = kw as isize - pad[1] as isize;
                let (w_lo, w_hi) = valid_range(ow, stride[1], off_w, iw);
                if w_lo >= w_hi {
                    continue;
                }
                for b in 0..input.batch {
                    let src_plane = (b * input.channels + ci) * is;
                    let col_base = b * os;
                    if columnar {
                        let sy = (h_lo * stride[0]) as isize + off_h;
                        f(row, col_base + h_lo, src_plane + sy as usize, h_hi - h_lo, stride[0]);
                        continue;
                    }
                    for y in h_lo..h_hi {
                        let sy = (y * stride[0]) as isize + off_h;
                        let src_row = src_plane + sy as usize * iw;
                        let sx0 = (w_lo * stride[1]) as isize + off_w;
                        f(
                            row,
                            col_base + y * ow + w_lo,
                            src_row + sx0 as usize,
                            w_hi - w_lo,
                            stride[1],
                        );
                    }
                }
            }
        }
    }
}

fn im2col<T: Real>(geom: &ConvGeometry, x: &[T]) -> Vec<T> {
    let cols = geom.col_cols();
    let mut col = vec![T::zero(); geom.col_rows() * cols];
    for_each_tap(geom, |row, c0, s0, n, step| {
        let dst = &mut col[row * cols + c0..row * cols + c0 + n];
        if step == 1 {
            dst.copy_from_slice(&x[s0..s0 + n]);
        } else {
            for (d, &v) in dst.iter_mut().zip(x[s0..].iter().step_by(step)) {
                *d = v;
            }
        }
    });
    col
}

fn col2im_add<T: Real>(geom: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let cols = geom.col_cols();
    for_each_tap(geom, |row, c0, s0, n, step| {
        let src = &col[row * cols + c0..row * cols + c0 + n];
        for (d, &v) in dx[s0..].iter_mut().step_by(step).zip(src) {
            *d = *d + v;
        }
    });
}

impl<T: Real> Tape<T> {
    /// Same-padded cross-correlation. `weight` is `(out, in, k)` for rank 1
    /// and `(out, in, k, k)` for rank 2; `bias` has `out` entries.
    pub fn conv(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.layout(x)?, self.value(weight).shape(), stride)?;
        let c_out = geom.output.channels;
        if let Some(b) = bias {
            if self.value(b).len() != c_out {
                return Err(shape_err!(
                    "conv: bias has {} entries for {} output channels",
                    self.value(b).len(),
                    c_out
                ));
            }
        }
        let col = im2col(&geom, self.value(x).data());
        let (k, n) = (geom.col_rows(), geom.col_cols());
        let mut tmp = vec![T::zero(); c_out * n];
        T::gemm(
            c_out,
            k,
            n,
            self.value(weight).data(),
            (k, 1),
            &col,
            (n, 1),
            T::zero(),
            &mut tmp,
            (n, 1),
        );
        drop(col);
        let os = geom.output.spatial_len();
        let bias_v = bias.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); tmp.len()];
        for b in 0..geom.input.batch {
            for co in 0..c_out {
                let bv = bias_v.map_or(T::zero(), |bv| bv[co]);
                let src = &tmp[co * n + b * os..co * n + (b + 1) * os];
                let dst = &mut out[(b * c_out + co) * os..(b * c_out + co + 1) * os];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let out = Tensor::new(geom.output.shape(), out)?;
        Ok(self.push(
            out,
            Op::Conv {
                x,
                weight,
                bias,
                geom,
            },
        ))
    }
}

pub(super) fn backward<T: Real>(
    tape: &Tape<T>,
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    x: Var,
    weight: Var,
    bias: Option<Var>,
    geom: &ConvGeometry,
) -> Result<()> {
    let c_out = geom.output.channels;
    let (k, n) = (geom.col_rows(), geom.col_cols());
    let os = geom.output.spatial_len();
    // (c_out, batch * spatial) view of the upstream gradient
    let mut gt = vec![T::zero(); c_out * n];
    for b in 0..geom.input.batch {
        for co in 0..c_out {
            gt[co * n + b * os..co * n + (b + 1) * os]
                .copy_from_slice(&g[(b * c_out + co) * os..(b * c_out + co + 1) * os]);
        }
    }
    if let Some(bias) = bias {
        accumulate(grads, bias, c_out, |d| {
            for (co, d) in d.iter_mut().enumerate() {
                *d = gt[co * n..(co + 1) * n].iter().fold(*d, |acc, &v| acc + v);
            }
        });
    }
    let col = im2col(geom, tape.value(x).data());
    accumulate(grads, weight, c_out * k, |dw| {
        T::gemm(c_out, n, k, &gt, (n, 1), &col, (1, n), T::one(), dw, (k, 1));
    });
    drop(col);
    let w = tape.value(weight).data();
    let mut dcol = vec![T::zero(); k * n];
    T::gemm(k, c_out, n, w, (1, k), &gt, (n, 1), T::zero(), &mut dcol, (n, 1));
    accumulate(grads, x, tape.value(x).len(), |dx| col2im_add(geom, &dcol, dx));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_clips_both_ends() {
        // k=3, pad=1: offsets -1..=1 over 5 outputs
        assert_eq!(valid_range(5, 1, -1, 5), (1, 5));
        assert_eq!(valid_range(5, 1, 1, 5), (0, 4));
        assert_eq!(valid_range(5, 1, 0, 5), (0, 5));
        // stride 2, 4 outputs from 8 inputs, offset 2
        assert_eq!(valid_range(4, 2, 2, 8), (0, 3));
        assert_eq!(valid_range(4, 2, -1, 8), (1, 4));
    }

    #[test]
    fn same_padding_geometry() {
        let l = Layout::of(&[2, 3, 16, 16]).unwrap();
        let g = ConvGeometry::new(l, &[4, 3, 3, 3], 2).unwrap();
        assert_eq!(g.output.shape(), vec![2, 4, 8, 8]);
        let l = Layout::of(&[1, 1, 7]).unwrap();
        let g = ConvGeometry::new(l, &[1, 1, 3], 2).unwrap();
        assert_eq!(g.output.dims[0], 4);
    }

    #[test]
    fn rejects_bad_kernels() {
        let l = Layout::of(&[1, 2, 8]).unwrap();
        assert!(ConvGeometry::new(l, &[1, 3, 3], 1).is_err());
        assert!(ConvGeometry::new(l, &[1, 2, 7], 1).is_err());
        assert!(ConvGeometry::new(l, &[1, 2, 3, 3], 1).is_err());
        let l2 = Layout::of(&[1, 2, 8, 8]).unwrap();
        assert!(ConvGeometry::new(l2, &[1, 2, 3, 5], 1).is_err());
    }
}
