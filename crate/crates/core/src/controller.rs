//! Recurrent REINFORCE controller that emits block designs one decision at a
//! time: for every genome, cell by cell and subcell by subcell, first the
//! input then the op.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::{uniform, ParamId, ParamKind, ParamStore};
use crate::search_space::{BlockDesign, Genome, OpKind, SearchSpaceSpec};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub hidden: usize,
    pub temperature: f64,
    pub entropy_weight: f64,
    pub baseline_decay: f64,
    pub lr: f64,
    pub grad_clip: f64,
    /// Bound of the uniform init of embeddings and recurrent weights.
    pub init_scale: f64,
    /// Sample separate encoder and decoder genomes.
    pub split: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            temperature: 1.0,
            entropy_weight: 1e-4,
            baseline_decay: 0.95,
            lr: 3.5e-4,
            grad_clip: 5.0,
            init_scale: 0.1,
            split: false,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("controller: {m}")));
        if self.hidden == 0 {
            return bad("hidden size must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad("baseline decay must lie in [0, 1)");
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || !(self.entropy_weight >= 0.0) {
            return bad("lr and grad_clip must be positive, entropy_weight non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    /// Input choice of a cell with this many legal options.
    Input(usize),
    Op,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledArch {
    pub design: BlockDesign,
    /// Chosen index at every decision step.
    pub actions: Vec<usize>,
    pub log_prob: f64,
    pub entropy: f64,
}

impl SampledArch {
    /// The (encoder) genome.
    pub fn genome(&self) -> &Genome {
        self.design.encoder()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub mean_reward: f64,
    /// Baseline used for the advantages of this step.
    pub baseline: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

struct Ids {
    start: ParamId,
    emb_input: ParamId,
    emb_op: ParamId,
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    op_w: ParamId,
    op_b: ParamId,
    /// `(weight, bias)` of the input projection of cell `c`, index `c - 1`.
    input: Vec<(ParamId, ParamId)>,
}

/// Per-step values kept for backpropagation.
struct Cache<T> {
    x: Vec<T>,
    h_prev: Vec<T>,
    c_prev: Vec<T>,
    /// Gate activations `[i, f, g, o]`, each `hidden` long.
    gates: Vec<T>,
    tanh_c: Vec<T>,
    h: Vec<T>,
    probs: Vec<T>,
}

pub struct Controller<T: Real = f64> {
    pub config: ControllerConfig,
    space: SearchSpaceSpec,
    store: ParamStore<T>,
    ids: Ids,
    adam: Adam<T>,
    baseline: f64,
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `out += m @ v` for row-major `m` of shape `(out.len(), v.len())`.
fn matvec_add<T: Real>(m: &[T], v: &[T], out: &mut [T]) {
    let n = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m[r * n..(r + 1) * n];
        *o = row.iter().zip(v).fold(*o, |a, (&w, &x)| a + w * x);
    }
}

/// `out += mᵀ @ u`.
fn matvec_t_add<T: Real>(m: &[T], u: &[T], out: &mut [T]) {
    let n = out.len();
    for (r, &ur) in u.iter().enumerate() {
        if ur == T::zero() {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(&m[r * n..(r + 1) * n]) {
            *o = *o + w * ur;
        }
    }
}

/// `g += u ⊗ v`.
fn outer_add<T: Real>(g: &mut [T], u: &[T], v: &[T]) {
    let n = v.len();
    for (r, &ur) in u.iter().enumerate() {
        if ur == T::zero() {
            continue;
        }
        for (o, &x) in g[r * n..(r + 1) * n].iter_mut().zip(v) {
            *o = *o + ur * x;
        }
    }
}

impl<T: Real> Controller<T> {
    pub fn new(space: SearchSpaceSpec, config: ControllerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if space.n_cells == 0 || space.n_subcells == 0 {
            return Err(Error::InvalidArgument("controller needs at least one cell and subcell".into()));
        }
        let h = config.hidden;
        let s = config.init_scale;
        let mut store = ParamStore::new();
        let mut add = |name: &str, shape: &[usize], init: bool| {
            let value = if init { uniform(shape, s, seed, name) } else { Tensor::zeros(shape) };
            store.add(name, ParamKind::Trainable, value)
        };
        let start = add("emb.start", &[1, h], true);
        let emb_input = add("emb.input", &[space.n_cells, h], true);
        let emb_op = add("emb.op", &[space.n_ops(), h], true);
        let wx = add("lstm.wx", &[4 * h, h], true);
        let wh = add("lstm.wh", &[4 * h, h], true);
        let b = add("lstm.bias", &[4 * h], false);
        // zero projections: a fresh controller is uniform over legal choices
        let op_w = add("proj.op.weight", &[space.n_ops(), h], false);
        let op_b = add("proj.op.bias", &[space.n_ops()], false);
        let input = (1..=space.n_cells)
            .map(|c| {
                (
                    add(&format!("proj.input{c}.weight"), &[c, h], false),
                    add(&format!("proj.input{c}.bias"), &[c], false),
                )
            })
            .collect();
        Ok(Self {
            config,
            space,
            store,
            ids: Ids {
                start,
                emb_input,
                emb_op,
                wx,
                wh,
                b,
                op_w,
                op_b,
                input,
            },
            adam: Adam::new(AdamConfig::with_lr(config.lr)),
            baseline: 0.0,
        })
    }

    pub fn space(&self) -> SearchSpaceSpec {
        self.space
    }

    pub fn config(&self) -> ControllerConfig {
        self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    /// Replaces parameter values and baseline, e.g. from a checkpoint.
    /// Optimizer moments restart.
    pub fn restore(&mut self, store: ParamStore<T>, baseline: f64) -> Result<()> {
        let same = store.len() == self.store.len()
            && store
                .entries()
                .iter()
                .zip(self.store.entries())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !same {
            return Err(Error::InvalidArgument("controller checkpoint does not match this configuration".into()));
        }
        if !baseline.is_finite() {
            return Err(Error::InvalidArgument("controller baseline must be finite".into()));
        }
        self.store = store;
        self.baseline = baseline;
        self.adam = Adam::new(AdamConfig::with_lr(self.config.lr));
        Ok(())
    }

    fn n_genomes(&self) -> usize {
        if self.config.split {
            2
        } else {
            1
        }
    }

    fn steps(&self) -> Vec<Step> {
        let mut out = Vec::new();
        for _ in 0..self.n_genomes() {
            for c in 1..=self.space.n_cells {
                for _ in 0..self.space.n_subcells {
                    out.push(Step::Input(c));
                    out.push(Step::Op);
                }
            }
        }
        out
    }

    /// Number of decisions per sampled design.
    pub fn n_decisions(&self) -> usize {
        self.steps().len()
    }

    fn row(&self, id: ParamId, r: usize) -> &[T] {
        let h = self.config.hidden;
        &self.store.value(id).data()[r * h..(r + 1) * h]
    }

    fn projection(&self, step: Step) -> (ParamId, ParamId) {
        match step {
            Step::Op => (self.ids.op_w, self.ids.op_b),
            Step::Input(c) => self.ids.input[c - 1],
        }
    }

    /// Runs the policy. `choose` picks an action given the step index and
    /// probabilities.
    fn unroll(&self, mut choose: impl FnMut(usize, &[T]) -> usize) -> (Vec<usize>, Vec<Cache<T>>) {
        let h = self.config.hidden;
        let steps = self.steps();
        let temp = T::from_f64(self.config.temperature);
        let wx = self.store.value(self.ids.wx).data();
        let wh = self.store.value(self.ids.wh).data();
        let bias = self.store.value(self.ids.b).data();
        let mut hs = vec![T::zero(); h];
        let mut cs = vec![T::zero(); h];
        let mut actions = Vec::with_capacity(steps.len());
        let mut caches = Vec::with_capacity(steps.len());
        for (t, &step) in steps.iter().enumerate() {
            let x = match t {
                0 => self.row(self.ids.start, 0).to_vec(),
                _ => match steps[t - 1] {
                    Step::Input(_) => self.row(self.ids.emb_input, actions[t - 1]).to_vec(),
                    Step::Op => self.row(self.ids.emb_op, actions[t - 1]).to_vec(),
                },
            };
            let mut pre = bias.to_vec();
            matvec_add(wx, &x, &mut pre);
            matvec_add(wh, &hs, &mut pre);
            let mut gates = pre;
            for (k, v) in gates.iter_mut().enumerate() {
                *v = if k / h == 2 { v.tanh() } else { sigmoid(*v) };
            }
            let mut c = vec![T::zero(); h];
            let mut tanh_c = vec![T::zero(); h];
            let mut hn = vec![T::zero(); h];
            for j in 0..h {
                let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                c[j] = f * cs[j] + i * g;
                tanh_c[j] = c[j].tanh();
                hn[j] = o * tanh_c[j];
            }
            let (pw, pb) = self.projection(step);
            let mut logits = self.store.value(pb).data().to_vec();
            matvec_add(self.store.value(pw).data(), &hn, &mut logits);
            let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b / temp));
            let mut probs: Vec<T> = logits.iter().map(|&z| (z / temp - m).exp()).collect();
            let s = probs.iter().fold(T::zero(), |a, &b| a + b);
            probs.iter_mut().for_each(|p| *p = *p / s);
            let a = choose(t, &probs);
            actions.push(a);
            caches.push(Cache {
                x,
                h_prev: core::mem::replace(&mut hs, hn.clone()),
                c_prev: core::mem::replace(&mut cs, c),
                gates,
                tanh_c,
                h: hn,
                probs,
            });
        }
        (actions, caches)
    }

    fn log_prob_entropy(actions: &[usize], caches: &[Cache<T>]) -> (f64, f64) {
        let mut lp = 0.0;
        let mut ent = 0.0;
        for (a, c) in actions.iter().zip(caches) {
            lp += libm::log(c.probs[*a].as_f64());
            ent += c.probs.iter().map(|p| p.as_f64()).filter(|&p| p > 0.0).map(|p| -p * libm::log(p)).sum::<f64>();
        }
        (lp, ent)
    }

    fn decode(&self, actions: &[usize]) -> BlockDesign {
        let per = 2 * self.space.n_cells * self.space.n_subcells;
        let genomes: Vec<Genome> = actions
            .chunks(per)
            .map(|g| {
                let genes: Vec<(usize, OpKind)> = g.chunks(2).map(|p| (p[0], OpKind::ALL[p[1]])).collect();
                Genome::from_genes(self.space.n_subcells, &genes)
            })
            .collect();
        BlockDesign::from_genomes(genomes).expect("one or two genomes")
    }

    fn finish(&self, actions: Vec<usize>, caches: &[Cache<T>]) -> SampledArch {
        let (log_prob, entropy) = Self::log_prob_entropy(&actions, caches);
        SampledArch {
            design: self.decode(&actions),
            actions,
            log_prob,
            entropy,
        }
    }

    /// Draws a design autoregressively; input choices are masked to the
    /// legal range by construction.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SampledArch {
        let (actions, caches) = self.unroll(|_, p| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (k, &pk) in p.iter().enumerate() {
                acc += pk.as_f64();
                if u < acc {
                    return k;
                }
            }
            p.len() - 1
        });
        self.finish(actions, &caches)
    }

    /// Most probable action at every step (first on ties).
    pub fn argmax(&self) -> SampledArch {
        let (actions, caches) = self.unroll(|_, p| {
            let mut best = 0;
            for (k, &pk) in p.iter().enumerate() {
                if pk > p[best] {
                    best = k;
                }
            }
            best
        });
        self.finish(actions, &caches)
    }

    pub fn argmax_genome(&self) -> Genome {
        self.argmax().genome().clone()
    }

    fn check_actions(&self, actions: &[usize]) -> Result<()> {
        let steps = self.steps();
        if actions.len() != steps.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} actions, found {}",
                steps.len(),
                actions.len()
            )));
        }
        for (t, (&a, s)) in actions.iter().zip(&steps).enumerate() {
            let n = match s {
                Step::Input(c) => *c,
                Step::Op => self.space.n_ops(),
            };
            if a >= n {
                return Err(Error::InvalidArgument(format!("action {a} at step {t} outside 0..{n}")));
            }
        }
        Ok(())
    }

    /// Log-probability and entropy of a fixed action sequence under the
    /// current policy.
    pub fn score(&self, actions: &[usize]) -> Result<(f64, f64)> {
        self.check_actions(actions)?;
        let (_, caches) = self.unroll(|t, _| actions[t]);
        Ok(Self::log_prob_entropy(actions, &caches))
    }

    /// Actions that produce `design` under this controller's decision order.
    pub fn actions_of(&self, design: &BlockDesign) -> Result<Vec<usize>> {
        design.check(&self.space)?;
        let genomes = match (design, self.config.split) {
            (BlockDesign::Shared(g), false) => vec![g],
            (d, true) => vec![d.encoder(), d.decoder()],
            (BlockDesign::Split { .. }, false) => {
                return Err(Error::InvalidArgument("split design given to a shared-block controller".into()))
            }
        };
        Ok(genomes.iter().flat_map(|g| g.genes().flat_map(|x| [x.input, x.op.id()])).collect())
    }

    /// Objective `adv · log p(actions) + entropy_weight · H` and its gradient
    /// with respect to every parameter, in store order.
    pub fn objective_gradient(&self, actions: &[usize], advantage: f64) -> Result<(f64, Vec<Vec<T>>)> {
        self.check_actions(actions)?;
        let h = self.config.hidden;
        let steps = self.steps();
        let (_, caches) = self.unroll(|t, _| actions[t]);
        let (lp, ent) = Self::log_prob_entropy(actions, &caches);
        let beta = self.config.entropy_weight;
        let objective = advantage * lp + beta * ent;

        let mut grads: Vec<Vec<T>> = self.store.entries().iter().map(|e| vec![T::zero(); e.value.len()]).collect();
        let adv = T::from_f64(advantage);
        let beta = T::from_f64(beta);
        let inv_t = T::one() / T::from_f64(self.config.temperature);
        let wx = self.store.value(self.ids.wx).data();
        let wh = self.store.value(self.ids.wh).data();
        let mut dh_next = vec![T::zero(); h];
        let mut dc_next = vec![T::zero(); h];
        for t in (0..steps.len()).rev() {
            let cache = &caches[t];
            let p = &cache.probs;
            // d/d(logit) of adv·log p_a + beta·H, through the temperature
            let ent_t = p.iter().fold(T::zero(), |acc, &q| if q > T::zero() { acc - q * q.ln() } else { acc });
            let dz: Vec<T> = p
                .iter()
                .enumerate()
                .map(|(k, &q)| {
                    let onehot = if k == actions[t] { T::one() } else { T::zero() };
                    let dent = if q > T::zero() { -q * (q.ln() + ent_t) } else { T::zero() };
                    (adv * (onehot - q) + beta * dent) * inv_t
                })
                .collect();
            let (pw, pb) = self.projection(steps[t]);
            outer_add(&mut grads[pw.index()], &dz, &cache.h);
            grads[pb.index()].iter_mut().zip(&dz).for_each(|(g, &d)| *g = *g + d);
            let mut dh = dh_next.clone();
            matvec_t_add(self.store.value(pw).data(), &dz, &mut dh);

            let g = &cache.gates;
            let mut da = vec![T::zero(); 4 * h];
            let mut dc_prev = vec![T::zero(); h];
            for j in 0..h {
                let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tc = cache.tanh_c[j];
                let dc = dc_next[j] + dh[j] * o * (T::one() - tc * tc);
                let d_o = dh[j] * tc;
                let di = dc * gg;
                let dg = dc * i;
                let df = dc * cache.c_prev[j];
                dc_prev[j] = dc * f;
                da[j] = di * i * (T::one() - i);
                da[h + j] = df * f * (T::one() - f);
                da[2 * h + j] = dg * (T::one() - gg * gg);
                da[3 * h + j] = d_o * o * (T::one() - o);
            }
            outer_add(&mut grads[self.ids.wx.index()], &da, &cache.x);
            outer_add(&mut grads[self.ids.wh.index()], &da, &cache.h_prev);
            grads[self.ids.b.index()].iter_mut().zip(&da).for_each(|(g, &d)| *g = *g + d);
            let mut dx = vec![T::zero(); h];
            matvec_t_add(wx, &da, &mut dx);
            let (emb, r) = match t {
                0 => (self.ids.start, 0),
                _ => match steps[t - 1] {
                    Step::Input(_) => (self.ids.emb_input, actions[t - 1]),
                    Step::Op => (self.ids.emb_op, actions[t - 1]),
                },
            };
            grads[emb.index()][r * h..(r + 1) * h]
                .iter_mut()
                .zip(&dx)
                .for_each(|(g, &d)| *g = *g + d);
            let mut dhp = vec![T::zero(); h];
            matvec_t_add(wh, &da, &mut dhp);
            dh_next = dhp;
            dc_next = dc_prev;
        }
        Ok((objective, grads))
    }

    /// One policy-gradient ascent step on the batch-mean objective, then the
    /// baseline moves toward the batch-mean reward.
    pub fn reinforce_step(&mut self, batch: &[(SampledArch, f64)]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Empty("reinforce_step needs at least one sample".into()));
        }
        for (_, r) in batch {
            if !(0.0..=1.0).contains(r) {
                return Err(Error::InvalidArgument(format!("reward {r} outside [0, 1]")));
            }
        }
        let n = batch.len() as f64;
        let b = self.baseline;
        let mut total: Option<Vec<Vec<T>>> = None;
        let mut entropy = 0.0;
        for (arch, r) in batch {
            let (_, g) = self.objective_gradient(&arch.actions, r - b)?;
            entropy += arch.entropy / n;
            match &mut total {
                None => total = Some(g),
                Some(t) => t.iter_mut().zip(&g).for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(x, &y)| *x = *x + y)),
            }
        }
        let mut grads = total.expect("non-empty batch");
        let scale = T::from_f64(1.0 / n);
        let norm_sq: f64 = grads
            .iter_mut()
            .flat_map(|g| g.iter_mut())
            .map(|g| {
                *g = *g * scale;
                g.as_f64() * g.as_f64()
            })
            .sum();
        let grad_norm = libm::sqrt(norm_sq);
        if !grad_norm.is_finite() {
            return Err(Error::Divergence(format!("controller gradient norm {grad_norm}")));
        }
        // ascent: Adam descends along the negated, clipped gradient
        let clip = if grad_norm > self.config.grad_clip { self.config.grad_clip / grad_norm } else { 1.0 };
        let factor = T::from_f64(-clip);
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|g| *g = *g * factor);
        let ids: Vec<ParamId> = self.store.ids().collect();
        self.adam.step(&mut self.store, ids.iter().zip(&grads).map(|(&id, g)| (id, g.as_slice())));

        let mean_reward = batch.iter().map(|(_, r)| r).sum::<f64>() / n;
        let d = self.config.baseline_decay;
        self.baseline = d * b + (1.0 - d) * mean_reward;
        Ok(StepStats {
            mean_reward,
            baseline: b,
            entropy,
            grad_norm,
        })
    }

}
