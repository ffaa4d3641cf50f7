//! Command-line surface: `gen-data`, `search`, `train`, `eval`, `report`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use enas_unet_core::datagen::{GenConfig, Split, SplitSpec};
use enas_unet_core::search::{
    evaluate_split, run_search, train_model, Architecture, Policy, SearchSchedule, TrainConfig,
};
use enas_unet_core::search_space::{decode_design, encode_design, preset, Preset, SearchSpaceSpec, PRESET_NAMES};
use enas_unet_core::supernet::SupernetSpec;
use log::info;
use serde_json::json;

use crate::checkpoint::{self, CheckpointKind};
use crate::dataset;
use crate::error::{Error, IoContext, Result};
use crate::fsutil::{prepare_dir, write_atomic, write_json};
use crate::manifest::{MonotonicClock, Run};
use crate::report::{self, model_label, EvalReport, ReportFile, SearchReport, TrainProvenance};

const RUN_FILE: &str = "run.json";

#[derive(Debug, Parser)]
#[command(name = "enas-unet", version, about = "Weight-sharing architecture search for U-Net segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic layered-scan dataset.
    GenData(GenDataArgs),
    /// Search a block design with the controller (or uniform sampling).
    Search(SearchArgs),
    /// Train a genome or preset block from scratch.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint on one split.
    Eval(EvalArgs),
    /// Aggregate search and eval reports into CSV tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// 2 writes B-scans, 1 writes the A-scans of the same B-scans.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub rank: u8,
    #[arg(long, default_value_t = 64)]
    pub depth: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// B-scans per split as `train,reward,val,test`, or `desk` / `full`.
    #[arg(long, default_value = "desk", value_parser = parse_splits)]
    pub splits: SplitSpec,
    #[arg(long, default_value_t = 0.1)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0.3)]
    pub drusen_prob: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing dataset directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchedulePreset {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Controller,
    Uniform,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub rank: u8,
    /// Schedule defaults; explicit flags below override single values.
    #[arg(long, value_enum, default_value = "full")]
    pub preset: SchedulePreset,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Supernet steps per epoch (default: one pass at the full preset).
    #[arg(long)]
    pub supernet_steps: Option<usize>,
    #[arg(long)]
    pub controller_steps: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "controller")]
    pub policy: PolicyArg,
    /// Search separate encoder and decoder genomes.
    #[arg(long)]
    pub split_design: bool,
    /// Best design, as genome JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Full search result.
    #[arg(long)]
    pub report: PathBuf,
    /// Also save the supernet and controller under this directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("block").required(true).args(["genome", "preset"]))]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Genome JSON, e.g. written by `search`.
    #[arg(long)]
    pub genome: Option<PathBuf>,
    /// Named block: baseline_resnet, enas_block_a, enas_block_b.
    #[arg(long)]
    pub preset: Option<String>,
    /// Search report the genome came from; recorded for reporting.
    #[arg(long, requires = "genome")]
    pub search_report: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub rank: u8,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Search and eval report files.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// Directory receiving table.csv and curves.csv.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_splits(s: &str) -> std::result::Result<SplitSpec, String> {
    match s {
        "desk" => return Ok(SplitSpec::DESK),
        "full" => return Ok(SplitSpec::FULL),
        _ => {}
    }
    let n: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match n[..] {
        [n_train, n_reward, n_val, n_test] => Ok(SplitSpec {
            n_train,
            n_reward,
            n_val,
            n_test,
        }),
        _ => Err(format!("expected 4 comma-separated counts, got {}", n.len())),
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| format!("unknown split `{s}` (train, reward, val, test)"))
}

/// `report.json` -> `report.run.json`.
fn sibling_run_file(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.run.json"))
}

fn check_rank(dir: &Path, data_rank: usize, rank: usize) -> Result<()> {
    if data_rank != rank {
        return Err(Error::format(
            dir,
            format!("dataset holds rank-{data_rank} volumes, the command asked for rank {rank}"),
        ));
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Search(a) => search(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Report(a) => report(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = GenConfig {
        seed: a.seed,
        rank: a.rank as usize,
        depth: a.depth,
        width: a.width,
        split: a.splits,
        noise_sigma: a.noise_sigma,
        drusen_prob: a.drusen_prob,
        ..GenConfig::default()
    };
    cfg.validate()?;
    prepare_dir(&a.out, a.force, &[dataset::MANIFEST, RUN_FILE])?;
    let run = Run::start(&a.out.join(RUN_FILE), "gen-data", json!({ "generator": cfg }), vec![cfg.seed], vec![a.out.clone()])?;
    let out = dataset::generate_to(&a.out, &cfg);
    if let Ok((m, _)) = &out {
        info!("wrote rank-{} dataset, {:?} volumes per split, to {}", m.rank, m.counts, a.out.display());
    }
    run.finish(&out)?;
    out.map(|_| ())
}

fn search(a: &SearchArgs) -> Result<()> {
    let (dm, data) = dataset::load(&a.data)?;
    let rank = a.rank as usize;
    check_rank(&a.data, dm.rank, rank)?;
    let mut sched = match a.preset {
        SchedulePreset::Desk => SearchSchedule::desk(a.seed),
        SchedulePreset::Full => SearchSchedule::full(a.seed),
    };
    if let Some(e) = a.epochs {
        sched.epochs = e;
    }
    if let Some(s) = a.supernet_steps {
        sched.supernet_steps_per_epoch = Some(s);
    }
    if let Some(s) = a.controller_steps {
        sched.controller_steps_per_epoch = s;
    }
    if let Some(s) = a.samples {
        sched.n_derive_samples = s;
    }
    sched.controller.split = a.split_design;
    sched.validate()?;
    let policy = match a.policy {
        PolicyArg::Controller => Policy::Controller,
        PolicyArg::Uniform => Policy::Uniform,
    };
    let spec = SupernetSpec::default().with_rank(rank);
    if let Some(dir) = &a.checkpoint {
        prepare_dir(dir, a.force, &[RUN_FILE, "supernet/checkpoint.json"])?;
    }
    let mut outputs = vec![a.out.clone(), a.report.clone()];
    outputs.extend(a.checkpoint.clone());
    let config = json!({
        "data": a.data,
        "dataset": dm,
        "spec": spec,
        "schedule": sched,
        "policy": policy,
    });
    let run = Run::start(&sibling_run_file(&a.report), "search", config, vec![a.seed, dm.generator.seed], outputs)?;
    let out = (|| {
        let clock = MonotonicClock::new();
        let outcome = run_search(&data, spec, &sched, policy, &clock, &mut |e| {
            info!(
                "epoch {:>3}: supernet loss {:.4}, mean reward {:.4}, baseline {:.4}, entropy {:.3}, {:.1}s",
                e.epoch + 1,
                e.supernet_loss,
                e.mean_reward,
                e.baseline,
                e.entropy,
                e.seconds
            );
        })?;
        let r = &outcome.result;
        info!(
            "best of {} samples: val dice {:.4}, search {:.1}s: {}",
            r.candidates.len(),
            r.best_val_dice,
            r.wall_clock_seconds,
            encode_design(&r.best)
        );
        write_atomic(&a.out, format!("{}\n", encode_design(&r.best)).as_bytes())?;
        let report = ReportFile::Search(SearchReport {
            data: dm.generator,
            result: r.clone(),
        });
        write_json(&a.report, &report)?;
        if let Some(dir) = &a.checkpoint {
            let prov = json!({ "search_report": a.report, "dataset": dm.generator });
            checkpoint::save_network(&dir.join("supernet"), &outcome.supernet, None, prov.clone())?;
            checkpoint::save_controller(&dir.join("controller"), &outcome.controller, sched.seed, prov)?;
        }
        Ok(())
    })();
    run.finish(&out)?;
    out
}

fn train(a: &TrainArgs) -> Result<()> {
    let (dm, data) = dataset::load(&a.data)?;
    let rank = a.rank as usize;
    check_rank(&a.data, dm.rank, rank)?;
    let space = SearchSpaceSpec::default();
    let (arch, preset_name) = match (&a.genome, &a.preset) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path).at(path)?;
            let design = decode_design(&text, &space).map_err(|e| Error::Core {
                context: path.display().to_string(),
                source: e,
            })?;
            (Architecture::Searched(design), None)
        }
        (None, Some(name)) => {
            let arch = match preset(name).map_err(|_| {
                Error::Usage(format!("unknown preset `{name}` (one of {})", PRESET_NAMES.join(", ")))
            })? {
                Preset::Fixed(_) => Architecture::BaselineResnet,
                Preset::Genome(g) => Architecture::Searched(enas_unet_core::search_space::BlockDesign::Shared(g)),
            };
            (arch, Some(name.as_str()))
        }
        _ => return Err(Error::Usage("give exactly one of --genome and --preset".into())),
    };
    let search = match &a.search_report {
        Some(path) => match report::read_report(path)? {
            ReportFile::Search(s) => {
                if Some(&s.result.best) != arch.design() {
                    return Err(Error::Usage(format!("{} did not select this genome", path.display())));
                }
                Some(s.search_ref())
            }
            ReportFile::Eval(_) => return Err(Error::Usage(format!("{} is not a search report", path.display()))),
        },
        None => None,
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        batch_size: a.batch_size,
        lr: a.lr,
    };
    cfg.validate()?;
    let spec = SupernetSpec::default().with_rank(rank);
    let label = model_label(&arch, preset_name, search.as_ref(), rank);
    prepare_dir(&a.out, a.force, &[checkpoint::MANIFEST, RUN_FILE])?;
    let config = json!({
        "data": a.data,
        "dataset": dm,
        "spec": spec,
        "architecture": arch,
        "train": cfg,
        "search": search,
    });
    let run = Run::start(&a.out.join(RUN_FILE), "train", config, vec![a.seed, dm.generator.seed], vec![a.out.clone()])?;
    let out = (|| {
        info!("training {label} for {} epochs", cfg.epochs);
        let t = train_model(&data, spec, &arch, &cfg, &mut |e, loss| info!("epoch {:>3}: dice loss {loss:.4}", e + 1))?;
        let prov = TrainProvenance {
            label: label.clone(),
            data: dm.generator,
            train: cfg,
            search,
            loss_curve: t.loss_curve.clone(),
        };
        let prov = serde_json::to_value(&prov).expect("provenance serializes");
        checkpoint::save_network(&a.out, &t.net, Some(&arch), prov)
    })();
    run.finish(&out)?;
    out
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (net, m) = checkpoint::load_network(&a.ckpt)?;
    let ck = a.ckpt.join(checkpoint::MANIFEST);
    if m.kind != CheckpointKind::Model {
        return Err(Error::format(&ck, "eval needs a trained model checkpoint"));
    }
    let arch = m.architecture.clone().expect("model checkpoints carry their architecture");
    let prov: TrainProvenance = serde_json::from_value(m.provenance.clone()).at(&ck)?;
    let dm = dataset::read_manifest(&a.data)?;
    if dm.rank != net.spec.rank {
        return Err(Error::format(
            &a.data,
            format!("rank mismatch: checkpoint is rank {}, dataset is rank {}", net.spec.rank, dm.rank),
        ));
    }
    let (_, data) = dataset::load(&a.data)?;
    let config = json!({ "data": a.data, "ckpt": a.ckpt, "split": a.split });
    let run = Run::start(&sibling_run_file(&a.out), "eval", config, vec![m.seed], vec![a.out.clone()])?;
    let out = (|| {
        let dice = evaluate_split(&net, &arch, &data, a.split)?;
        info!("{}: {} dice {:.4} ± {:.4} over {} volumes", prov.label, a.split.name(), dice.mean, dice.std_over_volumes, dice.n_volumes);
        let report = ReportFile::Eval(EvalReport {
            model: prov.label.clone(),
            architecture: arch.clone(),
            rank: net.spec.rank,
            split: a.split,
            data: dm.generator,
            train: prov.train,
            search: prov.search,
            dice,
        });
        write_json(&a.out, &report)
    })();
    run.finish(&out)?;
    out
}

fn report(a: &ReportArgs) -> Result<()> {
    let inputs = a
        .inputs
        .iter()
        .map(|p| Ok((p.clone(), report::read_report(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let agg = report::aggregate(&inputs)?;
    std::fs::create_dir_all(&a.out).at(&a.out)?;
    let run = Run::start(
        &a.out.join(RUN_FILE),
        "report",
        json!({ "inputs": a.inputs }),
        Vec::new(),
        vec![a.out.join("table.csv"), a.out.join("curves.csv")],
    )?;
    let out = report::write_csvs(&a.out, &agg);
    if out.is_ok() {
        for r in &agg.table {
            let opt = |v: Option<f64>, p: usize| v.map(|x| format!("{x:.p$}")).unwrap_or_else(|| "-".into());
            println!(
                "{:<44} {:>5} mean {:.4} std {:>6} search s {:>8} ratio {:>6}",
                r.model,
                r.split,
                r.mean_dice,
                opt(r.std_dice, 4),
                opt(r.search_seconds, 1),
                opt(r.search_time_ratio, 3)
            );
        }
    }
    run.finish(&out)?;
    out.map(|_| ())
}
