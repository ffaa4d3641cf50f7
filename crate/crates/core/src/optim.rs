use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: u32,
}

/// Adam with per-parameter step counts. Parameters that receive no gradient
/// in a step are left untouched, moments included.
#[derive(Debug, Clone)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    state: Vec<Option<Moments<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: Vec::new(),
        }
    }

    /// One descent step along the supplied gradients.
    pub fn step<'a, I>(&mut self, store: &mut ParamStore<T>, grads: I)
    where
        I: IntoIterator<Item = (ParamId, &'a [T])>,
    {
        let c = self.config;
        for (id, g) in grads {
            if store.kind(id) != ParamKind::Trainable {
                continue;
            }
            if self.state.len() <= id.index() {
                self.state.resize_with(id.index() + 1, || None);
            }
            let n = g.len();
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                steps: 0,
            });
            st.steps += 1;
            let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
            let bc1 = 1.0 - libm::pow(c.beta1, st.steps as f64);
            let bc2 = 1.0 - libm::pow(c.beta2, st.steps as f64);
            let step = T::from_f64(c.lr / bc1);
            let bc2 = T::from_f64(bc2);
            let eps = T::from_f64(c.eps);
            let p = store.value_mut(id).data_mut();
            for i in 0..n {
                let gi = g[i];
                st.m[i] = b1 * st.m[i] + (T::one() - b1) * gi;
                st.v[i] = b2 * st.v[i] + (T::one() - b2) * gi * gi;
                p[i] = p[i] - step * st.m[i] / ((st.v[i] / bc2).sqrt() + eps);
            }
        }
    }
}
