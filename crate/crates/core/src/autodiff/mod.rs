//! Reverse-mode automatic differentiation over feature maps.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] consumes it and yields [`Gradients`] for every leaf.
//! Parameters enter the tape through [`Tape::param`], which remembers the
//! originating [`ParamId`] so optimizers can map gradients back.

mod conv;
mod norm;
mod pool;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Layout, Real, Tensor};

pub use conv::ConvGeometry;
pub use norm::BatchStats;
pub use pool::PoolKind;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Relu(Var),
    Sum(Var),
    DotConst(Var, Vec<T>),
    Conv {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        argmax: Vec<u32>,
    },
    Upsample(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Softmax(Var),
    SoftDice {
        probs: Var,
        labels: Vec<u8>,
        stats: Vec<[T; 3]>,
        included: Vec<bool>,
        eps: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recording of a single forward pass.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant or input leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a parameter leaf. Repeated calls with the same id return the
    /// same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone());
        self.params.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters recorded on this tape, in first-use order.
    pub fn params(&self) -> &[(ParamId, Var)] {
        &self.params
    }

    fn layout(&self, v: Var) -> Result<Layout> {
        self.value(v).layout()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err!(
                "add: operand shapes differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `sum(x * weights)` for a constant weight tensor of the same size.
    pub fn dot_const(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let vx = self.value(x);
        if vx.len() != weights.len() {
            return Err(shape_err!(
                "dot_const: {} weights for {} elements",
                weights.len(),
                vx.len()
            ));
        }
        let s = vx
            .data()
            .iter()
            .zip(weights)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        Ok(self.push(Tensor::scalar(s), Op::DotConst(x, weights.to_vec())))
    }

    /// Softmax over the channel axis at every spatial position.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let l = self.layout(x)?;
        let src = self.value(x).data();
        let s = l.spatial_len();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..l.batch {
            let base = b * l.channels * s;
            for p in 0..s {
                let mut m = T::neg_infinity();
                for c in 0..l.channels {
                    m = m.max(src[base + c * s + p]);
                }
                let mut z = T::zero();
                for c in 0..l.channels {
                    let e = (src[base + c * s + p] - m).exp();
                    out[base + c * s + p] = e;
                    z = z + e;
                }
                for c in 0..l.channels {
                    out[base + c * s + p] = out[base + c * s + p] / z;
                }
            }
        }
        let out = Tensor::new(l.shape(), out)?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Runs the backward pass from a scalar `loss`.
    ///
    /// The tape can be differentiated once; a second call fails with
    /// [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, self.value(*a).len(), |d| add_into(d, &g));
                    accumulate(&mut grads, *b, self.value(*b).len(), |d| add_into(d, &g));
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    accumulate(&mut grads, *x, xv.len(), |d| {
                        for ((d, &gv), &v) in d.iter_mut().zip(&g).zip(xv) {
                            if v > T::zero() {
                                *d = *d + gv;
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    let g0 = g[0];
                    accumulate(&mut grads, *x, self.value(*x).len(), |d| {
                        d.iter_mut().for_each(|d| *d = *d + g0)
                    });
                }
                Op::DotConst(x, w) => {
                    let g0 = g[0];
                    accumulate(&mut grads, *x, w.len(), |d| {
                        for (d, &w) in d.iter_mut().zip(w) {
                            *d = *d + g0 * w;
                        }
                    });
                }
                Op::Softmax(x) => {
                    let l = node.value.layout()?;
                    let p = node.value.data();
                    let s = l.spatial_len();
                    accumulate(&mut grads, *x, p.len(), |d| {
                        for b in 0..l.batch {
                            let base = b * l.channels * s;
                            for q in 0..s {
                                let mut dot = T::zero();
                                for c in 0..l.channels {
                                    let k = base + c * s + q;
                                    dot = dot + g[k] * p[k];
                                }
                                for c in 0..l.channels {
                                    let k = base + c * s + q;
                                    d[k] = d[k] + p[k] * (g[k] - dot);
                                }
                            }
                        }
                    });
                }
                Op::Conv { x, weight, bias, geom } => {
                    conv::backward(self, &mut grads, &g, *x, *weight, *bias, geom)?;
                }
                Op::Pool { x, kind, argmax } => {
                    pool::pool_backward(self, &mut grads, &g, *x, *kind, argmax)?;
                }
                Op::Upsample(x) => {
                    pool::upsample_backward(self, &mut grads, &g, *x)?;
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    norm::backward(
                        self,
                        &mut grads,
                        &g,
                        (*x, *gamma, *beta),
                        xhat,
                        inv_std,
                        *batch_stats,
                    )?;
                }
                Op::SoftDice {
                    probs,
                    labels,
                    stats,
                    included,
                    eps,
                } => {
                    norm::soft_dice_backward(
                        self, &mut grads, g[0], *probs, labels, stats, included, *eps,
                    )?;
                }
            }
        }

        let leaf_grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g)))
            .map(|g| g.transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients {
            grads: leaf_grads,
            params: self.params.clone(),
        })
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Adds into the gradient buffer of `v`, allocating it on first touch.
fn accumulate<T: Real>(
    grads: &mut [Option<Vec<T>>],
    v: Var,
    len: usize,
    f: impl FnOnce(&mut [T]),
) {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

/// Gradients of a scalar loss with respect to every leaf of a tape.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every parameter that was recorded on the tape and
    /// reached by the backward pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }

    /// Gradient for a parameter; `None` when it was never reached.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.wrt(v))
    }
}
