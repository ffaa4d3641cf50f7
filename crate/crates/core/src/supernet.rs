//! U-Net macro skeleton with weight-shared searchable blocks.
//!
//! Layout for `n_stages = S`:
//!
//! ```text
//! stem conv3 -> [block -> stride-2 conv3 (x2 channels)] * S -> block
//!            -> [x2 upsample -> 1x1 conv (/2 channels) -> + skip -> block] * S
//!            -> 1x1 conv head
//! ```
//!
//! Every fixed conv except the head is conv -> norm -> relu. Normalizing the
//! up-projection matters when the searched blocks are parameter-free: the
//! decoder is then otherwise linear, and the dice loss inflates the logits
//! until the softmax saturates.
//!
//! Every block position owns one conv3 and one conv5 candidate (each
//! conv -> norm -> relu) per subcell slot. A forward pass with a genome only
//! touches the candidates that genome selects, so parameters off the active
//! path never receive gradient.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, PoolKind, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{he_normal, ParamId, ParamKind, ParamStore};
use crate::search_space::{BlockDesign, Genome, OpKind, SearchSpaceSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub eps: f64,
    /// Fraction of the running statistic kept per update.
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupernetSpec {
    /// Spatial rank of the data: 1 (A-scans) or 2 (B-scans).
    pub rank: usize,
    pub n_stages: usize,
    pub base_channels: usize,
    pub n_classes: usize,
    pub in_channels: usize,
    pub norm: NormConfig,
    pub space: SearchSpaceSpec,
}

impl Default for SupernetSpec {
    fn default() -> Self {
        Self {
            rank: 1,
            n_stages: 3,
            base_channels: 16,
            n_classes: 4,
            in_channels: 1,
            norm: NormConfig::default(),
            space: SearchSpaceSpec::default(),
        }
    }
}

impl SupernetSpec {
    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !matches!(self.rank, 1 | 2) {
            return bad(format!("rank must be 1 or 2, got {}", self.rank));
        }
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if !(self.norm.eps > 0.0) || !(self.norm.momentum > 0.0 && self.norm.momentum < 1.0) {
            return bad("norm eps must be > 0 and momentum in (0, 1)".into());
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Required divisor of every spatial extent.
    pub fn size_multiple(&self) -> usize {
        1 << self.n_stages
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.rank + 2 {
            return Err(Error::Shape(format!(
                "expected rank-{} input (batch, channel, spatial...), got shape {shape:?}",
                self.rank
            )));
        }
        if shape[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {}",
                self.in_channels, shape[1]
            )));
        }
        let m = self.size_multiple();
        if let Some(&d) = shape[2..].iter().find(|&&d| d == 0 || d % m != 0) {
            return Err(Error::Shape(format!(
                "spatial size {d} is not a positive multiple of 2^{} = {m}",
                self.n_stages
            )));
        }
        Ok(())
    }

    fn kernel_shape(&self, c_out: usize, c_in: usize, k: usize) -> Vec<usize> {
        if self.rank == 1 {
            vec![c_out, c_in, k]
        } else {
            vec![c_out, c_in, k, k]
        }
    }
}

/// Re-targets a searched design at rank 2. The genome is rank-free; kernels
/// are extended isotropically when the network is instantiated and no
/// weights carry over.
pub fn extend_to_2d(design: &BlockDesign, spec: &SupernetSpec) -> (BlockDesign, SupernetSpec) {
    (design.clone(), spec.with_rank(2))
}

/// What the block positions hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockFamily {
    /// Searchable cells with per-slot conv candidates.
    Searchable,
    /// Fixed residual blocks (conv3-norm-relu x2 + identity skip).
    Resnet,
}

/// Which searchable candidates get parameters.
#[derive(Debug, Clone, Copy)]
pub enum Allocation<'a> {
    All,
    Only(&'a BlockDesign),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated by the caller via
    /// [`Network::apply_norm_stats`].
    Train,
    /// Batch statistics, nothing recorded.
    BatchStats,
    /// Running statistics.
    Running,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormUnit {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvUnit {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Option<NormUnit>,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubcellUnits {
    pub conv3: Option<ConvUnit>,
    pub conv5: Option<ConvUnit>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockUnits {
    /// Indexed `[cell][subcell]`.
    Searchable(Vec<Vec<SubcellUnits>>),
    Resnet { a: ConvUnit, b: ConvUnit },
}

/// Where a block sits in the U-Net.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Encoder(usize),
    Bottleneck,
    Decoder(usize),
}

impl Position {
    pub fn label(self) -> String {
        match self {
            Position::Encoder(i) => format!("enc{i}"),
            Position::Bottleneck => "mid".into(),
            Position::Decoder(i) => format!("dec{i}"),
        }
    }
}

/// Pending running-statistic update from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct NormUpdate {
    pub unit: NormUnit,
    pub stats: BatchStats<f32>,
}

/// Result of [`Network::forward`]; the wiring vars are exposed for
/// inspection.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub norm_updates: Vec<NormUpdate>,
    /// Encoder block outputs, shallowest first.
    pub skips: Vec<Var>,
    /// Upsampled-and-projected decoder features, shallowest first.
    pub upsampled: Vec<Var>,
    /// `upsampled[i] + skips[i]`, the input of decoder block `i`.
    pub decoder_inputs: Vec<Var>,
}

/// Network weights plus the structure that addresses them.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: SupernetSpec,
    pub family: BlockFamily,
    pub store: ParamStore<f32>,
    pub seed: u64,
    stem: ConvUnit,
    blocks: Vec<(Position, BlockUnits)>,
    downs: Vec<ConvUnit>,
    ups: Vec<ConvUnit>,
    head: ConvUnit,
}

struct Builder<'a> {
    spec: &'a SupernetSpec,
    store: ParamStore<f32>,
    seed: u64,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, norm: bool) -> ConvUnit {
        let shape = self.spec.kernel_shape(c_out, c_in, k);
        let fan_in = c_in * k.pow(self.spec.rank as u32);
        let wname = format!("{name}.weight");
        let w = he_normal(&shape, fan_in, self.seed, &wname);
        let weight = self.store.add(wname, ParamKind::Trainable, w);
        let bias = self.store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[c_out]));
        let norm = norm.then(|| NormUnit {
            gamma: self.store.add(format!("{name}.norm.gamma"), ParamKind::Trainable, Tensor::full(&[c_out], 1.0)),
            beta: self.store.add(format!("{name}.norm.beta"), ParamKind::Trainable, Tensor::zeros(&[c_out])),
            running_mean: self.store.add(format!("{name}.norm.running_mean"), ParamKind::Buffer, Tensor::zeros(&[c_out])),
            running_var: self.store.add(format!("{name}.norm.running_var"), ParamKind::Buffer, Tensor::full(&[c_out], 1.0)),
        });
        ConvUnit {
            weight,
            bias,
            norm,
            stride,
        }
    }

    fn block(&mut self, pos: Position, c: usize, family: BlockFamily, alloc: Allocation) -> BlockUnits {
        let p = pos.label();
        match family {
            BlockFamily::Resnet => BlockUnits::Resnet {
                a: self.conv(&format!("{p}.res.a"), c, c, 3, 1, true),
                b: self.conv(&format!("{p}.res.b"), c, c, 3, 1, true),
            },
            BlockFamily::Searchable => {
                let genome = match (alloc, pos) {
                    (Allocation::All, _) => None,
                    (Allocation::Only(d), Position::Decoder(_)) => Some(d.decoder()),
                    (Allocation::Only(d), _) => Some(d.encoder()),
                };
                let space = self.spec.space;
                let cells = (0..space.n_cells)
                    .map(|ci| {
                        (0..space.n_subcells)
                            .map(|si| {
                                let wanted = |op: OpKind| match genome {
                                    None => true,
                                    Some(g) => {
                                        g.live_cells().get(ci).copied().unwrap_or(false)
                                            && g.cells.get(ci).and_then(|cell| cell.subcells.get(si)).map(|s| s.op) == Some(op)
                                    }
                                };
                                let name = |op: OpKind| format!("{p}.c{}.s{}.{}", ci + 1, si + 1, op.name());
                                SubcellUnits {
                                    conv3: wanted(OpKind::Conv3).then(|| self.conv(&name(OpKind::Conv3), c, c, 3, 1, true)),
                                    conv5: wanted(OpKind::Conv5).then(|| self.conv(&name(OpKind::Conv5), c, c, 5, 1, true)),
                                }
                            })
                            .collect()
                    })
                    .collect();
                BlockUnits::Searchable(cells)
            }
        }
    }
}

struct Pass<'t> {
    tape: &'t mut Tape<f32>,
    mode: NormMode,
    updates: Vec<NormUpdate>,
}

impl Network {
    /// Fresh network: He-normal convs, zero head. Parameter values depend only on `seed`
    /// and the parameter name.
    pub fn new(spec: SupernetSpec, family: BlockFamily, alloc: Allocation, seed: u64) -> Result<Self> {
        spec.validate()?;
        if let Allocation::Only(d) = alloc {
            d.check(&spec.space)?;
        }
        let mut b = Builder {
            spec: &spec,
            store: ParamStore::new(),
            seed,
        };
        let n = spec.n_stages;
        let stem = b.conv("stem", spec.in_channels, spec.channels(0), 3, 1, true);
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        for i in 0..n {
            blocks.push((Position::Encoder(i), b.block(Position::Encoder(i), spec.channels(i), family, alloc)));
            downs.push(b.conv(&format!("down{i}"), spec.channels(i), spec.channels(i + 1), 3, 2, true));
        }
        blocks.push((Position::Bottleneck, b.block(Position::Bottleneck, spec.channels(n), family, alloc)));
        for i in (0..n).rev() {
            ups.push(b.conv(&format!("up{i}"), spec.channels(i + 1), spec.channels(i), 1, 1, true));
            blocks.push((Position::Decoder(i), b.block(Position::Decoder(i), spec.channels(i), family, alloc)));
        }
        let head = b.conv("head", spec.channels(0), spec.n_classes, 1, 1, false);
        // Every class starts at probability 1/n. A random head leaves some
        // classes near zero everywhere, where the soft dice gradient
        // vanishes and the class never recovers.
        let shape = b.store.value(head.weight).shape().to_vec();
        *b.store.value_mut(head.weight) = Tensor::zeros(&shape);
        Ok(Self {
            spec,
            family,
            store: b.store,
            seed,
            stem,
            blocks,
            downs,
            ups,
            head,
        })
    }

    /// Supernet holding every candidate.
    pub fn supernet(spec: SupernetSpec, seed: u64) -> Result<Self> {
        Self::new(spec, BlockFamily::Searchable, Allocation::All, seed)
    }

    /// Standalone model with parameters for one design only.
    pub fn child(spec: SupernetSpec, design: &BlockDesign, seed: u64) -> Result<Self> {
        Self::new(spec, BlockFamily::Searchable, Allocation::Only(design), seed)
    }

    /// Residual-block baseline.
    pub fn baseline(spec: SupernetSpec, seed: u64) -> Result<Self> {
        Self::new(spec, BlockFamily::Resnet, Allocation::All, seed)
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn blocks(&self) -> &[(Position, BlockUnits)] {
        &self.blocks
    }

    pub fn head(&self) -> ConvUnit {
        self.head
    }

    /// Forward pass through the searchable network selected by `design`.
    pub fn forward(&self, tape: &mut Tape<f32>, design: &BlockDesign, x: Var, mode: NormMode) -> Result<Forward> {
        if self.family != BlockFamily::Searchable {
            return Err(Error::InvalidArgument("a genome forward needs a searchable network".into()));
        }
        design.check(&self.spec.space)?;
        self.run(tape, Some(design), x, mode)
    }

    /// Forward pass through the residual baseline; consumes no genome.
    pub fn forward_baseline(&self, tape: &mut Tape<f32>, x: Var, mode: NormMode) -> Result<Forward> {
        if self.family != BlockFamily::Resnet {
            return Err(Error::InvalidArgument("forward_baseline needs a residual network".into()));
        }
        self.run(tape, None, x, mode)
    }

    /// Dispatches on the network family; `design` is ignored by baselines.
    pub fn forward_any(&self, tape: &mut Tape<f32>, design: Option<&BlockDesign>, x: Var, mode: NormMode) -> Result<Forward> {
        match (self.family, design) {
            (BlockFamily::Resnet, _) => self.forward_baseline(tape, x, mode),
            (BlockFamily::Searchable, Some(d)) => self.forward(tape, d, x, mode),
            (BlockFamily::Searchable, None) => Err(Error::InvalidArgument("searchable network needs a design".into())),
        }
    }

    /// Class scores for a batch, without keeping the tape.
    pub fn predict(&self, design: Option<&BlockDesign>, x: Tensor<f32>, mode: NormMode) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let f = self.forward_any(&mut tape, design, xv, mode)?;
        Ok(tape.value(f.logits).clone())
    }

    fn run(&self, tape: &mut Tape<f32>, design: Option<&BlockDesign>, x: Var, mode: NormMode) -> Result<Forward> {
        self.spec.check_input(tape.value(x).shape())?;
        let mut pass = Pass {
            tape,
            mode,
            updates: Vec::new(),
        };
        let n = self.spec.n_stages;
        let mut h = self.conv_unit(&mut pass, &self.stem, x)?;
        let mut blocks = self.blocks.iter();
        let mut skips = Vec::with_capacity(n);
        for i in 0..n {
            let (_, units) = blocks.next().expect("encoder block");
            h = self.block(&mut pass, units, design.map(|d| d.encoder()), h)?;
            skips.push(h);
            h = self.conv_unit(&mut pass, &self.downs[i], h)?;
        }
        let (_, units) = blocks.next().expect("bottleneck block");
        h = self.block(&mut pass, units, design.map(|d| d.encoder()), h)?;
        let mut upsampled = vec![h; n];
        let mut decoder_inputs = vec![h; n];
        for (j, i) in (0..n).rev().enumerate() {
            let u = pass.tape.upsample(h)?;
            let u = self.conv_unit(&mut pass, &self.ups[j], u)?;
            let s = pass.tape.add(u, skips[i])?;
            upsampled[i] = u;
            decoder_inputs[i] = s;
            let (_, units) = blocks.next().expect("decoder block");
            h = self.block(&mut pass, units, design.map(|d| d.decoder()), s)?;
        }
        let logits = self.conv_unit(&mut pass, &self.head, h)?;
        Ok(Forward {
            logits,
            norm_updates: pass.updates,
            skips,
            upsampled,
            decoder_inputs,
        })
    }

    fn conv_unit(&self, pass: &mut Pass, unit: &ConvUnit, x: Var) -> Result<Var> {
        let w = pass.tape.param(&self.store, unit.weight);
        let b = pass.tape.param(&self.store, unit.bias);
        let y = pass.tape.conv(x, w, Some(b), unit.stride)?;
        let Some(norm) = unit.norm else { return Ok(y) };
        let gamma = pass.tape.param(&self.store, norm.gamma);
        let beta = pass.tape.param(&self.store, norm.beta);
        let eps = self.spec.norm.eps as f32;
        let y = match pass.mode {
            NormMode::Train | NormMode::BatchStats => {
                let (y, stats) = pass.tape.batch_norm(y, gamma, beta, eps)?;
                if pass.mode == NormMode::Train {
                    pass.updates.push(NormUpdate { unit: norm, stats });
                }
                y
            }
            NormMode::Running => pass.tape.norm_fixed(
                y,
                gamma,
                beta,
                self.store.value(norm.running_mean).data(),
                self.store.value(norm.running_var).data(),
                eps,
            )?,
        };
        Ok(pass.tape.relu(y))
    }

    fn block(&self, pass: &mut Pass, units: &BlockUnits, genome: Option<&Genome>, x: Var) -> Result<Var> {
        match (units, genome) {
            (BlockUnits::Resnet { a, b }, _) => {
                let y = self.conv_unit(pass, a, x)?;
                let y = self.conv_unit(pass, b, y)?;
                pass.tape.add(y, x)
            }
            (BlockUnits::Searchable(cells), Some(g)) => {
                let live = g.live_cells();
                let mut outputs: Vec<Option<Var>> = vec![Some(x)];
                for (ci, cell) in g.cells.iter().enumerate() {
                    if !live[ci] {
                        outputs.push(None);
                        continue;
                    }
                    let mut acc: Option<Var> = None;
                    for (si, gene) in cell.subcells.iter().enumerate() {
                        let input = outputs[gene.input].expect("live cells only read live cells");
                        let slot = &cells[ci][si];
                        let y = match gene.op {
                            OpKind::Conv3 | OpKind::Conv5 => {
                                let unit = if gene.op == OpKind::Conv3 { slot.conv3 } else { slot.conv5 };
                                let unit = unit.ok_or_else(|| {
                                    Error::InvalidArgument(format!(
                                        "network has no {} weights for cell {} subcell {}",
                                        gene.op.name(),
                                        ci + 1,
                                        si + 1
                                    ))
                                })?;
                                self.conv_unit(pass, &unit, input)?
                            }
                            OpKind::AvgPool3 => pass.tape.pool(input, PoolKind::Avg)?,
                            OpKind::MaxPool3 => pass.tape.pool(input, PoolKind::Max)?,
                            OpKind::Identity => input,
                        };
                        acc = Some(match acc {
                            None => y,
                            Some(a) => pass.tape.add(a, y)?,
                        });
                    }
                    outputs.push(acc);
                }
                outputs
                    .last()
                    .copied()
                    .flatten()
                    .ok_or_else(|| Error::InvalidArgument("genome has no cells".into()))
            }
            (BlockUnits::Searchable(_), None) => Err(Error::InvalidArgument("searchable block needs a genome".into())),
        }
    }

    /// Folds batch statistics from a training pass into the running
    /// statistics.
    pub fn apply_norm_stats(&mut self, updates: &[NormUpdate]) {
        let m = self.spec.norm.momentum as f32;
        for u in updates {
            let mean = self.store.value_mut(u.unit.running_mean).data_mut();
            for (r, &b) in mean.iter_mut().zip(&u.stats.mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            let var = self.store.value_mut(u.unit.running_var).data_mut();
            for (r, &b) in var.iter_mut().zip(&u.stats.var_unbiased) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }
}
