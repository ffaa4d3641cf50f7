//! Interleaved supernet/controller search, derivation, and retraining.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::controller::{Controller, ControllerConfig};
use crate::datagen::{batch, Dataset, Split, Volume};
use crate::error::{Error, Result};
use crate::metrics::{argmax_labels, class_dice, evaluate, soft_dice_loss, DiceConfig, DiceReport};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::search_space::{encode_design, BlockDesign};
use crate::supernet::{extend_to_2d, Network, NormMode, SupernetSpec};

/// Monotonic time source in seconds.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// Clock that never advances.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Controller,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSchedule {
    pub epochs: usize,
    /// Supernet steps per epoch; `None` is one pass over the training set.
    pub supernet_steps_per_epoch: Option<usize>,
    pub controller_steps_per_epoch: usize,
    pub n_derive_samples: usize,
    pub seed: u64,
    /// Training batch; `None` picks 32 A-scans or 4 B-scans.
    pub batch_size: Option<usize>,
    /// Reward minibatch; `None` picks 16 A-scans or 2 B-scans.
    pub reward_batch: Option<usize>,
    pub supernet_lr: f64,
    pub controller: ControllerConfig,
}

impl SearchSchedule {
    /// Full-scale schedule: 200 epochs, one pass over the training split each.
    pub fn full(seed: u64) -> Self {
        Self {
            epochs: 200,
            supernet_steps_per_epoch: None,
            controller_steps_per_epoch: 30,
            n_derive_samples: 20,
            seed,
            batch_size: None,
            reward_batch: None,
            supernet_lr: 1e-3,
            controller: ControllerConfig::default(),
        }
    }

    /// Desk scale: 15 supernet steps per epoch at both ranks, one pass
    /// over 60 B-scans in 2D.
    pub fn desk(seed: u64) -> Self {
        Self {
            epochs: 20,
            supernet_steps_per_epoch: Some(15),
            ..Self::full(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.n_derive_samples == 0 {
            return Err(Error::InvalidArgument("schedule needs epochs >= 1 and n_derive_samples >= 1".into()));
        }
        if self.supernet_steps_per_epoch == Some(0) || self.batch_size == Some(0) || self.reward_batch == Some(0) {
            return Err(Error::InvalidArgument("schedule step and batch counts must be positive".into()));
        }
        if !(self.supernet_lr > 0.0) {
            return Err(Error::InvalidArgument("supernet_lr must be positive".into()));
        }
        self.controller.validate()
    }

    pub fn train_batch(&self, rank: usize) -> usize {
        self.batch_size.unwrap_or(if rank == 1 { 32 } else { 4 })
    }

    pub fn reward_batch(&self, rank: usize) -> usize {
        self.reward_batch.unwrap_or(if rank == 1 { 16 } else { 2 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub design: BlockDesign,
    pub val_dice: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub supernet_loss: f64,
    pub mean_reward: f64,
    pub baseline: f64,
    pub entropy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub policy: Policy,
    pub best: BlockDesign,
    pub best_val_dice: f64,
    /// Derivation samples in sampling order.
    pub candidates: Vec<Candidate>,
    pub wall_clock_seconds: f64,
    /// Mean controller-phase reward per epoch.
    pub reward_curve: Vec<f64>,
    /// Mean supernet training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub spec: SupernetSpec,
    pub schedule: SearchSchedule,
}

/// Search output plus the trained state behind it.
pub struct SearchOutcome {
    pub result: SearchResult,
    pub supernet: Network,
    pub controller: Controller<f32>,
}

/// Index of the first maximum.
pub fn first_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

fn check_data(data: &Dataset, rank: usize, splits: &[Split]) -> Result<()> {
    for &s in splits {
        let v = data.split(s);
        if v.is_empty() {
            return Err(Error::Empty(format!("{} split is empty", s.name())));
        }
        if v.iter().any(|x| x.rank() != rank) {
            return Err(Error::InvalidArgument(format!(
                "{} split holds data of a different rank than {rank}",
                s.name()
            )));
        }
    }
    Ok(())
}

fn finite(loss: f32, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("non-finite loss {loss} at {what}")))
    }
}

/// One supernet gradient step on soft dice loss; returns the loss.
fn train_step(
    net: &mut Network,
    adam: &mut Adam<f32>,
    design: Option<&BlockDesign>,
    volumes: &[&Volume],
    dice: DiceConfig,
) -> Result<f32> {
    let (x, labels) = batch(volumes)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let f = net.forward_any(&mut tape, design, xv, NormMode::Train)?;
    let loss = soft_dice_loss(&mut tape, f.logits, &labels, dice)?;
    let value = tape.value(loss).data()[0];
    finite(value, "training step")?;
    let grads = tape.backward(loss)?;
    adam.step(&mut net.store, grads.params().map(|(id, g)| (id, g.data())));
    net.apply_norm_stats(&f.norm_updates);
    Ok(value)
}

/// Hard mean dice of a design on a pooled batch with batch statistics.
pub fn pooled_reward(net: &Network, design: &BlockDesign, volumes: &[&Volume], dice: DiceConfig) -> Result<f64> {
    let (x, labels) = batch(volumes)?;
    let scores = net.predict(Some(design), x, NormMode::BatchStats)?;
    let per_class = class_dice(&argmax_labels(&scores)?, &labels, net.spec.n_classes)?;
    let inc = dice.included(per_class.len());
    let kept: Vec<f64> = per_class.iter().zip(&inc).filter(|(_, &i)| i).map(|(&d, _)| d).collect();
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Shuffled training batches for one epoch.
fn epoch_batches(n: usize, batch_size: usize, steps: Option<usize>, seed: u64, label: &str, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::indexed_stream(seed, label, epoch as u64));
    let all: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    match steps {
        None => all,
        Some(s) => (0..s).map(|i| all[i % all.len()].clone()).collect(),
    }
}

/// Validation dice of each design with shared supernet weights.
pub fn rank_designs(net: &Network, designs: &[BlockDesign], val: &[Volume], dice: DiceConfig) -> Result<Vec<Candidate>> {
    designs
        .iter()
        .map(|d| {
            let r = evaluate(net, Some(d), val, val.len(), NormMode::BatchStats, dice)?;
            Ok(Candidate {
                design: d.clone(),
                val_dice: r.mean,
            })
        })
        .collect()
}

/// Summary of one controller phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseStats {
    pub mean_reward: f64,
    pub baseline: f64,
    pub entropy: f64,
}

/// `steps` REINFORCE steps, each on one sampled design scored by hard dice
/// on a random reward minibatch. The supernet is only borrowed.
#[allow(clippy::too_many_arguments)]
pub fn controller_phase(
    net: &Network,
    ctrl: &mut Controller<f32>,
    policy: Policy,
    reward_set: &[Volume],
    steps: usize,
    reward_batch: usize,
    sampler: &mut rng::Rng,
    reward_rng: &mut rng::Rng,
) -> Result<PhaseStats> {
    let dice = DiceConfig::default();
    let rb = reward_batch.min(reward_set.len());
    let mut sum = 0.0;
    let mut stats = PhaseStats {
        mean_reward: 0.0,
        baseline: ctrl.baseline(),
        entropy: 0.0,
    };
    for _ in 0..steps {
        let arch = ctrl.sample(sampler);
        let picks = rand::seq::index::sample(reward_rng, reward_set.len(), rb);
        let vols: Vec<&Volume> = picks.iter().map(|j| &reward_set[j]).collect();
        let r = pooled_reward(net, &arch.design, &vols, dice)?;
        sum += r;
        stats.entropy = arch.entropy;
        if policy == Policy::Controller {
            stats.baseline = ctrl.reinforce_step(&[(arch, r)])?.baseline;
        }
    }
    if steps > 0 {
        stats.mean_reward = sum / steps as f64;
    }
    Ok(stats)
}

/// Full search protocol with progress reporting per epoch.
pub fn run_search(
    data: &Dataset,
    spec: SupernetSpec,
    schedule: &SearchSchedule,
    policy: Policy,
    clock: &dyn Clock,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<SearchOutcome> {
    schedule.validate()?;
    spec.validate()?;
    check_data(data, spec.rank, &[Split::Train, Split::Reward, Split::Val])?;
    let start = clock.seconds();
    let seed = schedule.seed;
    let dice = DiceConfig::default();
    let mut net = Network::supernet(spec, seed)?;
    let mut adam = Adam::new(AdamConfig::with_lr(schedule.supernet_lr));
    let mut ctrl = Controller::<f32>::new(spec.space, schedule.controller, seed)?;
    let mut sampler = rng::stream(seed, "controller.sample");
    let mut reward_rng = rng::stream(seed, "search.reward_batch");

    let train = data.split(Split::Train);
    let reward_set = data.split(Split::Reward);
    let bs = schedule.train_batch(spec.rank);
    let rb = schedule.reward_batch(spec.rank).min(reward_set.len());
    let mut reward_curve = Vec::with_capacity(schedule.epochs);
    let mut loss_curve = Vec::with_capacity(schedule.epochs);

    for epoch in 0..schedule.epochs {
        // phase A: supernet on the training set, a fresh design per batch
        let batches = epoch_batches(train.len(), bs, schedule.supernet_steps_per_epoch, seed, "search.shuffle", epoch);
        let mut loss_sum = 0.0;
        for (i, idx) in batches.iter().enumerate() {
            let design = ctrl.sample(&mut sampler).design;
            let vols: Vec<&Volume> = idx.iter().map(|&j| &train[j]).collect();
            let loss = train_step(&mut net, &mut adam, Some(&design), &vols, dice).map_err(|e| match e {
                Error::Divergence(m) => Error::Divergence(format!(
                    "{m} (epoch {epoch}, batch {i}, design {})",
                    encode_design(&design)
                )),
                e => e,
            })?;
            loss_sum += loss as f64;
        }
        let supernet_loss = loss_sum / batches.len() as f64;

        // phase B: controller on reward minibatches, supernet frozen
        let phase = controller_phase(
            &net,
            &mut ctrl,
            policy,
            reward_set,
            schedule.controller_steps_per_epoch,
            rb,
            &mut sampler,
            &mut reward_rng,
        )?;
        let mean_reward = phase.mean_reward;
        reward_curve.push(mean_reward);
        loss_curve.push(supernet_loss);
        on_epoch(&EpochLog {
            epoch,
            supernet_loss,
            mean_reward,
            baseline: phase.baseline,
            entropy: phase.entropy,
            seconds: clock.seconds() - start,
        });
    }

    // derivation
    let designs: Vec<BlockDesign> = (0..schedule.n_derive_samples).map(|_| ctrl.sample(&mut sampler).design).collect();
    let candidates = rank_designs(&net, &designs, data.split(Split::Val), dice)?;
    let scores: Vec<f64> = candidates.iter().map(|c| c.val_dice).collect();
    let b = first_best(&scores).expect("at least one candidate");
    let result = SearchResult {
        policy,
        best: candidates[b].design.clone(),
        best_val_dice: candidates[b].val_dice,
        candidates,
        wall_clock_seconds: clock.seconds() - start,
        reward_curve,
        loss_curve,
        spec,
        schedule: *schedule,
    };
    Ok(SearchOutcome {
        result,
        supernet: net,
        controller: ctrl,
    })
}

/// Controller-driven search.
pub fn search(data: &Dataset, spec: SupernetSpec, schedule: &SearchSchedule, clock: &dyn Clock) -> Result<SearchResult> {
    Ok(run_search(data, spec, schedule, Policy::Controller, clock, &mut |_| {})?.result)
}

/// The same protocol with a uniform, never-updated policy.
pub fn random_search_baseline(
    data: &Dataset,
    spec: SupernetSpec,
    schedule: &SearchSchedule,
    clock: &dyn Clock,
) -> Result<SearchResult> {
    Ok(run_search(data, spec, schedule, Policy::Uniform, clock, &mut |_| {})?.result)
}

/// Model to train from scratch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Searched(BlockDesign),
    BaselineResnet,
}

impl Architecture {
    pub fn design(&self) -> Option<&BlockDesign> {
        match self {
            Architecture::Searched(d) => Some(d),
            Architecture::BaselineResnet => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    /// `None` picks 32 A-scans or 4 B-scans.
    pub batch_size: Option<usize>,
    pub lr: f64,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            epochs: 20,
            seed,
            batch_size: None,
            lr: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == Some(0) || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("training needs epochs >= 1, a positive batch and lr".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub net: Network,
    pub architecture: Architecture,
    pub loss_curve: Vec<f64>,
}

/// Untrained model for an architecture; initialization depends only on
/// `seed`.
pub fn init_model(spec: SupernetSpec, arch: &Architecture, seed: u64) -> Result<Network> {
    match arch {
        Architecture::Searched(d) => Network::child(spec, d, seed),
        Architecture::BaselineResnet => Network::baseline(spec, seed),
    }
}

/// Trains a fresh model on the training split.
pub fn train_model(
    data: &Dataset,
    spec: SupernetSpec,
    arch: &Architecture,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<Trained> {
    cfg.validate()?;
    check_data(data, spec.rank, &[Split::Train])?;
    let mut net = init_model(spec, arch, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let train = data.split(Split::Train);
    let bs = cfg.batch_size.unwrap_or(if spec.rank == 1 { 32 } else { 4 });
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(train.len(), bs, None, cfg.seed, "train.shuffle", epoch);
        let mut sum = 0.0;
        for idx in &batches {
            let vols: Vec<&Volume> = idx.iter().map(|&j| &train[j]).collect();
            sum += train_step(&mut net, &mut adam, arch.design(), &vols, DiceConfig::default())
                .map_err(|e| match e {
                    Error::Divergence(m) => Error::Divergence(format!("{m} (training epoch {epoch})")),
                    e => e,
                })? as f64;
        }
        let mean = sum / batches.len() as f64;
        loss_curve.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(Trained {
        net,
        architecture: arch.clone(),
        loss_curve,
    })
}

/// Hard dice on a split using running normalization statistics.
pub fn evaluate_split(net: &Network, arch: &Architecture, data: &Dataset, split: Split) -> Result<DiceReport> {
    check_data(data, net.spec.rank, &[split])?;
    let bs = if net.spec.rank == 1 { 256 } else { 8 };
    evaluate(net, arch.design(), data.split(split), bs, NormMode::Running, DiceConfig::default())
}

/// Retrain from scratch and report test dice.
pub fn retrain(data: &Dataset, spec: SupernetSpec, arch: &Architecture, cfg: &TrainConfig) -> Result<(Trained, DiceReport)> {
    let t = train_model(data, spec, arch, cfg, &mut |_, _| {})?;
    let report = evaluate_split(&t.net, arch, data, Split::Test)?;
    Ok((t, report))
}

/// Lifts a rank-1 design to rank 2 and retrains it on 2D data.
pub fn transfer_and_retrain(
    data2d: &Dataset,
    design_1d: &BlockDesign,
    spec_1d: &SupernetSpec,
    cfg: &TrainConfig,
) -> Result<(Trained, DiceReport)> {
    let (design, spec) = extend_to_2d(design_1d, spec_1d);
    retrain(data2d, spec, &Architecture::Searched(design), cfg)
}

/// Short label for reports.
pub fn architecture_label(arch: &Architecture) -> String {
    match arch {
        Architecture::Searched(d) => encode_design(d),
        Architecture::BaselineResnet => "baseline_resnet".into(),
    }
}
