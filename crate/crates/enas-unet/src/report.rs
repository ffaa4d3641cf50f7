//! JSON result files and their aggregation into plot-ready CSV tables.

use std::path::{Path, PathBuf};

use enas_unet_core::datagen::{GenConfig, Split};
use enas_unet_core::metrics::DiceReport;
use enas_unet_core::search::{Architecture, Policy, SearchResult, SearchSchedule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::fsutil::{read_json, write_atomic};

/// Identifies the search a genome came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRef {
    pub rank: usize,
    pub seed: u64,
    pub policy: Policy,
}

/// Stored as the provenance of a trained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainProvenance {
    pub label: String,
    pub data: GenConfig,
    pub train: TrainConfig,
    pub search: Option<SearchRef>,
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchReport {
    pub data: GenConfig,
    pub result: SearchResult,
}

/// Test-time report. Holds no paths or timings, so it is byte-identical
/// across repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub model: String,
    pub architecture: Architecture,
    pub rank: usize,
    pub split: Split,
    pub data: GenConfig,
    pub train: TrainConfig,
    pub search: Option<SearchRef>,
    pub dice: DiceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportFile {
    Search(SearchReport),
    Eval(EvalReport),
}

impl SearchReport {
    pub fn search_ref(&self) -> SearchRef {
        SearchRef {
            rank: self.result.spec.rank,
            seed: self.result.schedule.seed,
            policy: self.result.policy,
        }
    }
}

/// Human-readable model label, e.g. `ENAS U-Net 1D→2D`.
pub fn model_label(arch: &Architecture, preset: Option<&str>, search: Option<&SearchRef>, rank: usize) -> String {
    match (arch, search) {
        (Architecture::BaselineResnet, _) => format!("ResNet U-Net {rank}D"),
        (_, Some(s)) => {
            let method = match s.policy {
                Policy::Controller => "ENAS U-Net",
                Policy::Uniform => "Random-search U-Net",
            };
            if s.rank == rank {
                format!("{method} {rank}D")
            } else {
                format!("{method} {}D→{rank}D", s.rank)
            }
        }
        (_, None) => match preset {
            Some(p) => format!("{p} {rank}D"),
            None => format!("genome {rank}D"),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub source: String,
    pub model: String,
    pub rank: usize,
    pub split: String,
    pub mean_dice: f64,
    pub std_dice: Option<f64>,
    pub n_volumes: Option<usize>,
    pub search_seconds: Option<f64>,
    /// Search time over that of the highest-rank search among the inputs.
    pub search_time_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub run: String,
    pub rank: usize,
    pub policy: Policy,
    pub epoch: usize,
    pub mean_reward: f64,
    pub supernet_loss: f64,
}

pub struct Aggregate {
    pub table: Vec<TableRow>,
    pub curves: Vec<CurveRow>,
}

fn run_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn data_key(g: &GenConfig) -> GenConfig {
    GenConfig { rank: 0, ..*g }
}

fn schedule_key(s: &SearchSchedule) -> SearchSchedule {
    SearchSchedule { seed: 0, ..*s }
}

/// Checks that the inputs describe comparable runs and builds the tables.
pub fn aggregate(inputs: &[(PathBuf, ReportFile)]) -> Result<Aggregate> {
    if inputs.is_empty() {
        return Err(Error::Usage("report needs at least one input".into()));
    }
    let mut conflicts = Vec::new();
    let data_of = |f: &ReportFile| match f {
        ReportFile::Search(s) => s.data,
        ReportFile::Eval(e) => e.data,
    };
    let (p0, f0) = &inputs[0];
    for (p, f) in &inputs[1..] {
        if data_key(&data_of(f)) != data_key(&data_of(f0)) {
            conflicts.push(format!("{} and {} use different synthetic data", p0.display(), p.display()));
        }
    }
    let searches: Vec<(&PathBuf, &SearchReport)> = inputs
        .iter()
        .filter_map(|(p, f)| match f {
            ReportFile::Search(s) => Some((p, s)),
            _ => None,
        })
        .collect();
    let evals: Vec<(&PathBuf, &EvalReport)> = inputs
        .iter()
        .filter_map(|(p, f)| match f {
            ReportFile::Eval(e) => Some((p, e)),
            _ => None,
        })
        .collect();
    if let Some((p, s)) = searches.first() {
        for (q, t) in &searches[1..] {
            if schedule_key(&t.result.schedule) != schedule_key(&s.result.schedule) {
                conflicts.push(format!("{} and {} use different search schedules", p.display(), q.display()));
            }
        }
    }
    if let Some((p, e)) = evals.first() {
        for (q, f) in &evals[1..] {
            if f.split != e.split {
                conflicts.push(format!("{} and {} evaluate different splits", p.display(), q.display()));
            }
        }
    }
    if !conflicts.is_empty() {
        return Err(Error::format(&inputs[0].0, format!("incompatible inputs: {}", conflicts.join("; "))));
    }

    let t_high = searches
        .iter()
        .map(|(_, s)| s.result.spec.rank)
        .max()
        .and_then(|top| {
            searches
                .iter()
                .filter(|(_, s)| s.result.spec.rank == top)
                .map(|(_, s)| s.result.wall_clock_seconds)
                .reduce(f64::max)
        });
    let ratio = |t: Option<f64>| match (t, t_high) {
        (Some(t), Some(h)) if h > 0.0 => Some(t / h),
        _ => None,
    };
    let seconds_for = |r: &SearchRef, arch: &Architecture| {
        searches
            .iter()
            .find(|(_, s)| s.search_ref() == *r && Some(&s.result.best) == arch.design())
            .map(|(_, s)| s.result.wall_clock_seconds)
    };

    let mut table = Vec::new();
    let mut curves = Vec::new();
    for (path, f) in inputs {
        match f {
            ReportFile::Search(s) => {
                let r = &s.result;
                let t = Some(r.wall_clock_seconds);
                let label = model_label(&Architecture::Searched(r.best.clone()), None, Some(&s.search_ref()), r.spec.rank);
                table.push(TableRow {
                    source: format!("search:{}", run_name(path)),
                    model: format!("{label} (supernet weights)"),
                    rank: r.spec.rank,
                    split: Split::Val.name().into(),
                    mean_dice: r.best_val_dice,
                    std_dice: None,
                    n_volumes: None,
                    search_seconds: t,
                    search_time_ratio: ratio(t),
                });
                for (epoch, (&mean_reward, &supernet_loss)) in r.reward_curve.iter().zip(&r.loss_curve).enumerate() {
                    curves.push(CurveRow {
                        run: run_name(path),
                        rank: r.spec.rank,
                        policy: r.policy,
                        epoch,
                        mean_reward,
                        supernet_loss,
                    });
                }
            }
            ReportFile::Eval(e) => {
                let t = e.search.as_ref().and_then(|r| seconds_for(r, &e.architecture));
                table.push(TableRow {
                    source: format!("eval:{}", run_name(path)),
                    model: e.model.clone(),
                    rank: e.rank,
                    split: e.split.name().into(),
                    mean_dice: e.dice.mean,
                    std_dice: Some(e.dice.std_over_volumes),
                    n_volumes: Some(e.dice.n_volumes),
                    search_seconds: t,
                    search_time_ratio: ratio(t),
                });
            }
        }
    }
    Ok(Aggregate { table, curves })
}

fn csv_bytes<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::format(path, e.to_string()))
}

pub const TABLE_HEADER: [&str; 9] = [
    "source",
    "model",
    "rank",
    "split",
    "mean_dice",
    "std_dice",
    "n_volumes",
    "search_seconds",
    "search_time_ratio",
];
pub const CURVES_HEADER: [&str; 6] = ["run", "rank", "policy", "epoch", "mean_reward", "supernet_loss"];

/// Writes `table.csv` and `curves.csv` into `dir`.
pub fn write_csvs(dir: &Path, agg: &Aggregate) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).at(dir)?;
    let table = dir.join("table.csv");
    let curves = dir.join("curves.csv");
    write_atomic(&table, &csv_bytes(&table, &agg.table, &TABLE_HEADER)?)?;
    write_atomic(&curves, &csv_bytes(&curves, &agg.curves, &CURVES_HEADER)?)?;
    Ok((table, curves))
}

pub fn read_report(path: &Path) -> Result<ReportFile> {
    read_json(path)
}
