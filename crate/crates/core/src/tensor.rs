//! Dense tensors with a `(batch, channel, spatial...)` layout.
//!
//! Storage is 32-bit by default; every numeric routine is generic over
//! [`Real`] so that gradient checks can run the exact same code in 64-bit.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use num_traits::Float;

use crate::error::{shape_err, Result};

/// Scalar type usable for tensor storage.
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    /// `c = a @ b + beta * c` with explicit row/column strides.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

fn max_offset(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(k == 0 || max_offset(m, k, a_strides) < a.len());
                assert!(k == 0 || max_offset(k, n, b_strides) < b.len());
                assert!(max_offset(m, n, c_strides) < c.len());
                // SAFETY: every index touched by the kernel is bounded by the
                // asserts above; `c` is exclusively borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} elements but {} were supplied",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Interprets the tensor as a feature map and returns its layout.
    pub fn layout(&self) -> Result<Layout> {
        Layout::of(&self.shape)
    }
}

/// Decomposed feature-map shape: batch, channels and 1 or 2 spatial dims.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub batch: usize,
    pub channels: usize,
    /// Spatial dims; for rank 1 the second entry is 1.
    pub dims: [usize; 2],
    pub rank: usize,
}

impl Layout {
    pub fn of(shape: &[usize]) -> Result<Self> {
        match *shape {
            [b, c, l] => Ok(Self {
                batch: b,
                channels: c,
                dims: [l, 1],
                rank: 1,
            }),
            [b, c, h, w] => Ok(Self {
                batch: b,
                channels: c,
                dims: [h, w],
                rank: 2,
            }),
            _ => Err(shape_err!(
                "feature maps must be (batch, channel, spatial...) with spatial rank 1 or 2, got {:?}",
                shape
            )),
        }
    }

    pub fn spatial_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn shape(&self) -> Vec<usize> {
        match self.rank {
            1 => vec![self.batch, self.channels, self.dims[0]],
            _ => vec![self.batch, self.channels, self.dims[0], self.dims[1]],
        }
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }

    pub fn with_dims(mut self, dims: [usize; 2]) -> Self {
        self.dims = dims;
        self
    }
}
