//! Genome encoding of a searchable module block.
//!
//! A block has `n_cells` cells of `n_subcells` subcells each. Every subcell
//! picks an input (0 = block input, `i >= 1` = output of cell `i`) and one of
//! five operations; a cell outputs the sum of its subcells and the block
//! outputs its last cell. Cell `c` may only read cells `< c`, so every
//! genome is acyclic by construction.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Candidate operation of a subcell. Ids are stable: 0..=4 in declaration
/// order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Conv3,
    Conv5,
    AvgPool3,
    MaxPool3,
    Identity,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [
        OpKind::Conv3,
        OpKind::Conv5,
        OpKind::AvgPool3,
        OpKind::MaxPool3,
        OpKind::Identity,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv3 => "conv3",
            OpKind::Conv5 => "conv5",
            OpKind::AvgPool3 => "avgpool3",
            OpKind::MaxPool3 => "maxpool3",
            OpKind::Identity => "identity",
        }
    }

    /// Kernel extent for convolution ops.
    pub fn kernel(self) -> Option<usize> {
        match self {
            OpKind::Conv3 => Some(3),
            OpKind::Conv5 => Some(5),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubcellGene {
    pub input: usize,
    pub op: OpKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellGenes {
    pub subcells: Vec<SubcellGene>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genome {
    pub cells: Vec<CellGenes>,
}

impl Genome {
    /// Builds a genome from `(input, op)` pairs listed cell by cell.
    pub fn from_genes(n_subcells: usize, genes: &[(usize, OpKind)]) -> Self {
        Self {
            cells: genes
                .chunks(n_subcells)
                .map(|c| CellGenes {
                    subcells: c.iter().map(|&(input, op)| SubcellGene { input, op }).collect(),
                })
                .collect(),
        }
    }

    pub fn genes(&self) -> impl Iterator<Item = &SubcellGene> {
        self.cells.iter().flat_map(|c| c.subcells.iter())
    }

    /// Cells (0-based) whose output reaches the block output.
    pub fn live_cells(&self) -> Vec<bool> {
        let n = self.cells.len();
        let mut live = vec![false; n];
        if n == 0 {
            return live;
        }
        live[n - 1] = true;
        for c in (0..n).rev() {
            if !live[c] {
                continue;
            }
            for g in &self.cells[c].subcells {
                if g.input >= 1 && g.input <= c {
                    live[g.input - 1] = true;
                }
            }
        }
        live
    }
}

/// Size parameters of the micro search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpaceSpec {
    pub n_cells: usize,
    pub n_subcells: usize,
}

impl Default for SearchSpaceSpec {
    fn default() -> Self {
        Self {
            n_cells: 2,
            n_subcells: 2,
        }
    }
}

impl SearchSpaceSpec {
    pub fn n_ops(&self) -> usize {
        OpKind::ALL.len()
    }

    /// Number of distinct genomes: product over cells `c` of
    /// `(c * n_ops) ^ n_subcells`.
    pub fn cardinality(&self) -> u128 {
        (1..=self.n_cells)
            .map(|c| ((c * self.n_ops()) as u128).pow(self.n_subcells as u32))
            .product()
    }

    /// Every invariant violation of `g`; empty iff valid.
    pub fn validate(&self, g: &Genome) -> Vec<String> {
        let mut out = Vec::new();
        if g.cells.len() != self.n_cells {
            out.push(format!("expected {} cells, found {}", self.n_cells, g.cells.len()));
        }
        for (ci, cell) in g.cells.iter().enumerate() {
            let c = ci + 1;
            if cell.subcells.len() != self.n_subcells {
                out.push(format!(
                    "cell {c}: expected {} subcells, found {}",
                    self.n_subcells,
                    cell.subcells.len()
                ));
            }
            for (si, gene) in cell.subcells.iter().enumerate() {
                if gene.input >= c {
                    out.push(format!(
                        "cell {c} subcell {}: cell {c} cannot reference cell {}",
                        si + 1,
                        gene.input
                    ));
                }
            }
        }
        out
    }

    pub fn check(&self, g: &Genome) -> Result<()> {
        let v = self.validate(g);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidGenome(v))
        }
    }

    /// All genomes in lexicographic order of the flattened
    /// `(input, op id)` sequence, cell 1 subcell 1 most significant.
    pub fn enumerate(&self) -> Vec<Genome> {
        // radix of each decision digit, most significant first
        let mut radix = Vec::new();
        for c in 1..=self.n_cells {
            for _ in 0..self.n_subcells {
                radix.push(c);
                radix.push(self.n_ops());
            }
        }
        let total = self.cardinality() as usize;
        let mut digits = vec![0usize; radix.len()];
        let mut out = Vec::with_capacity(total);
        for _ in 0..total {
            let genes: Vec<(usize, OpKind)> = digits
                .chunks(2)
                .map(|d| (d[0], OpKind::ALL[d[1]]))
                .collect();
            out.push(Genome::from_genes(self.n_subcells, &genes));
            for i in (0..digits.len()).rev() {
                digits[i] += 1;
                if digits[i] < radix[i] {
                    break;
                }
                digits[i] = 0;
            }
        }
        out
    }
}

/// Architecture of every searchable position of the U-Net: one block shared
/// by all stages, or separate encoder (incl. bottleneck) and decoder blocks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BlockDesign {
    Shared(Genome),
    Split { encoder: Genome, decoder: Genome },
}

impl BlockDesign {
    pub fn encoder(&self) -> &Genome {
        match self {
            BlockDesign::Shared(g) => g,
            BlockDesign::Split { encoder, .. } => encoder,
        }
    }

    pub fn decoder(&self) -> &Genome {
        match self {
            BlockDesign::Shared(g) => g,
            BlockDesign::Split { decoder, .. } => decoder,
        }
    }

    pub fn genomes(&self) -> Vec<&Genome> {
        match self {
            BlockDesign::Shared(g) => vec![g],
            BlockDesign::Split { encoder, decoder } => vec![encoder, decoder],
        }
    }

    pub fn from_genomes(mut genomes: Vec<Genome>) -> Result<Self> {
        match genomes.len() {
            1 => Ok(BlockDesign::Shared(genomes.remove(0))),
            2 => {
                let decoder = genomes.pop().unwrap();
                let encoder = genomes.pop().unwrap();
                Ok(BlockDesign::Split { encoder, decoder })
            }
            n => Err(Error::InvalidArgument(format!("a design holds 1 or 2 genomes, got {n}"))),
        }
    }

    pub fn check(&self, spec: &SearchSpaceSpec) -> Result<()> {
        let mut v = Vec::new();
        for (i, g) in self.genomes().into_iter().enumerate() {
            v.extend(spec.validate(g).into_iter().map(|m| {
                if matches!(self, BlockDesign::Split { .. }) {
                    format!("{}: {m}", if i == 0 { "encoder" } else { "decoder" })
                } else {
                    m
                }
            }));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidGenome(v))
        }
    }
}

/// Canonical JSON text of a genome. Byte-stable for equal genomes.
pub fn encode(g: &Genome) -> String {
    serde_json::to_string(g).expect("genome serialization is infallible")
}

pub fn encode_design(d: &BlockDesign) -> String {
    serde_json::to_string(d).expect("design serialization is infallible")
}

fn parse_error(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Parses and validates a genome.
pub fn decode(text: &str, spec: &SearchSpaceSpec) -> Result<Genome> {
    let g: Genome = serde_json::from_str(text).map_err(parse_error)?;
    spec.check(&g)?;
    Ok(g)
}

/// Parses and validates either a bare genome or an encoder/decoder pair.
pub fn decode_design(text: &str, spec: &SearchSpaceSpec) -> Result<BlockDesign> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(parse_error)?;
    let split = v
        .as_object()
        .is_some_and(|o| o.contains_key("encoder") || o.contains_key("decoder"));
    let d = if split {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Pair {
            encoder: Genome,
            decoder: Genome,
        }
        let p: Pair = serde_json::from_str(text).map_err(parse_error)?;
        BlockDesign::Split {
            encoder: p.encoder,
            decoder: p.decoder,
        }
    } else {
        BlockDesign::Shared(serde_json::from_str(text).map_err(parse_error)?)
    };
    d.check(spec)?;
    Ok(d)
}

/// Hand-designed residual block: two conv3 stages plus an identity skip.
/// It is not expressible as a genome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedBlock {
    pub name: String,
    pub stages: Vec<OpKind>,
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Preset {
    Fixed(FixedBlock),
    Genome(Genome),
}

pub const PRESET_NAMES: [&str; 3] = ["baseline_resnet", "enas_block_a", "enas_block_b"];

/// Named block presets.
///
/// `enas_block_a` and `enas_block_b` stand in for the two learned blocks of
/// the reference architecture figure. The figure's gene values were not
/// available in machine-readable form, so these are documented placeholders
/// (marked transcribed-from-figure, unverified) and not claims about the
/// published blocks.
pub fn preset(name: &str) -> Result<Preset> {
    use OpKind::*;
    match name {
        "baseline_resnet" => Ok(Preset::Fixed(FixedBlock {
            name: name.to_string(),
            stages: vec![Conv3, Conv3],
            residual: true,
        })),
        "enas_block_a" => Ok(Preset::Genome(Genome::from_genes(
            2,
            &[(0, Conv3), (0, Conv5), (1, Conv3), (0, Identity)],
        ))),
        "enas_block_b" => Ok(Preset::Genome(Genome::from_genes(
            2,
            &[(0, Conv5), (0, MaxPool3), (1, Conv3), (1, AvgPool3)],
        ))),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

/// Provenance note attached to each preset.
pub fn preset_provenance(name: &str) -> Option<&'static str> {
    match name {
        "baseline_resnet" => Some("fixed residual block: conv3-norm-relu x2 + identity skip"),
        "enas_block_a" | "enas_block_b" => {
            Some("transcribed-from-figure (placeholder: figure gene values unavailable)")
        }
        _ => None,
    }
}
