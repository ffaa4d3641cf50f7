//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! fails. Run a subset with `cargo test --test acceptance -- 1 8`.
//! Set `ACCEPTANCE_DIR` to keep the end-to-end artifacts.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use enas_unet::core::autodiff::{PoolKind, Tape, Var};
use enas_unet::core::controller::{Controller, ControllerConfig};
use enas_unet::core::metrics::{class_dice, soft_dice_loss, DiceConfig};
use enas_unet::core::params::ParamKind;
use enas_unet::core::search_space::{decode, encode, BlockDesign, Genome, OpKind, SearchSpaceSpec};
use enas_unet::core::supernet::{Network, NormMode, SupernetSpec};
use enas_unet::core::{rng, Tensor};
use enas_unet::report::{read_report, EvalReport, ReportFile, SearchReport};
use rand::seq::IndexedRandom;
use rand::Rng;

type Outcome = Result<String, String>;

const RTOL: f64 = 1e-3;
const INSTANCES: usize = 20;

fn check(cond: bool, pass: String, fail: String) -> Outcome {
    if cond {
        Ok(pass)
    } else {
        Err(fail)
    }
}

// ---------------------------------------------------------------- criterion 1

/// Worst relative disagreement between backward and central differences of
/// the forward pass, over every element of every input.
fn fd_error(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).expect("backward");
    let eval = |ins: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
        let l = f(&mut t, &vs);
        t.value(l).data()[0]
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

fn random(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `[N, C, L]` or `[N, C, H, W]` with at most 64 elements.
fn small_shape(r: &mut impl Rng, rank: usize, batch: usize) -> Vec<usize> {
    if rank == 1 {
        vec![batch, r.random_range(1..3), r.random_range(2..9)]
    } else {
        vec![batch, r.random_range(1..3), r.random_range(2..5), r.random_range(2..5)]
    }
}

fn projected(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut r = rng::stream(seed, "projection");
    let w: Vec<f64> = (0..t.value(y).len()).map(|_| r.random_range(-1.0..1.0)).collect();
    t.dot_const(y, &w).unwrap()
}

fn controller_logprob_error(case: u64) -> f64 {
    let cfg = ControllerConfig {
        hidden: 6,
        entropy_weight: 0.0,
        ..Default::default()
    };
    let mut c = Controller::<f64>::new(SearchSpaceSpec::default(), cfg, case).unwrap();
    let mut r = rng::stream(case, "controller fd");
    let mut store = c.store().clone();
    for id in store.ids().collect::<Vec<_>>() {
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
    }
    c.restore(store.clone(), 0.0).unwrap();
    let actions = c.sample(&mut r).actions;
    let (_, grads) = c.objective_gradient(&actions, 1.0).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (pi, id) in store.ids().enumerate() {
        for k in 0..store.value(id).len() {
            let mut at = |d: f64| {
                let mut s = store.clone();
                s.value_mut(id).data_mut()[k] += d;
                c.restore(s, 0.0).unwrap();
                c.score(&actions).unwrap().0
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let a = grads[pi][k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

fn criterion_1() -> Outcome {
    let mut r = rng::stream(1, "acceptance gradients");
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, errs: Vec<f64>| {
        assert!(errs.len() >= INSTANCES);
        worst.push((name, errs.into_iter().fold(0.0, f64::max)));
    };

    for rank in [1, 2] {
        let errs = (0..INSTANCES)
            .map(|case| {
                let batch = r.random_range(1..3);
                let xs = small_shape(&mut r, rank, batch);
                let k = [1, 3, 5][case % 3];
                let stride = 1 + case % 2;
                let ws = if rank == 1 { vec![2, xs[1], k] } else { vec![2, xs[1], k, k] };
                let inputs = [random(&mut r, &xs), random(&mut r, &ws), random(&mut r, &[2])];
                fd_error(&inputs, |t, v| {
                    let y = t.conv(v[0], v[1], Some(v[2]), stride).unwrap();
                    projected(t, y, case as u64)
                })
            })
            .collect();
        record(if rank == 1 { "conv1d" } else { "conv2d" }, errs);
    }
    for (name, kind) in [("maxpool", PoolKind::Max), ("avgpool", PoolKind::Avg)] {
        let errs = (0..INSTANCES)
            .map(|case| {
                let xs = small_shape(&mut r, 1 + case % 2, 1);
                fd_error(&[random(&mut r, &xs)], |t, v| {
                    let y = t.pool(v[0], kind).unwrap();
                    projected(t, y, case as u64)
                })
            })
            .collect();
        record(name, errs);
    }
    let errs = (0..INSTANCES)
        .map(|case| {
            // batch of 2 so every channel has several elements
            let xs = small_shape(&mut r, 1 + case % 2, 2);
            let c = xs[1];
            let inputs = [random(&mut r, &xs), random(&mut r, &[c]), random(&mut r, &[c])];
            let mean: Vec<f64> = (0..c).map(|i| 0.2 * i as f64 - 0.1).collect();
            let var: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
            fd_error(&inputs, |t, v| {
                let y = if case % 2 == 0 {
                    t.batch_norm(v[0], v[1], v[2], 1e-5).unwrap().0
                } else {
                    t.norm_fixed(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap()
                };
                projected(t, y, case as u64)
            })
        })
        .collect();
    record("norm", errs);
    let errs = (0..INSTANCES)
        .map(|case| {
            let xs = small_shape(&mut r, 1 + case % 2, 1);
            fd_error(&[random(&mut r, &xs)], |t, v| {
                let y = t.relu(v[0]);
                projected(t, y, case as u64)
            })
        })
        .collect();
    record("relu", errs);
    let errs = (0..INSTANCES)
        .map(|case| {
            let batch = r.random_range(1..3);
            let mut shape = small_shape(&mut r, 1 + case % 2, batch);
            shape[1] = 4;
            let n: usize = shape.iter().product::<usize>() / 4;
            let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..4)).collect();
            let cfg = DiceConfig {
                include_background: case % 2 == 0,
            };
            fd_error(&[random(&mut r, &shape)], |t, v| soft_dice_loss(t, v[0], &labels, cfg).unwrap())
        })
        .collect();
    record("soft dice", errs);
    record("controller log-prob", (0..INSTANCES as u64).map(|c| controller_logprob_error(100 + c)).collect());

    let summary = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    let bad: Vec<_> = worst.iter().filter(|(_, e)| !(*e < RTOL)).collect();
    check(
        bad.is_empty(),
        format!("{INSTANCES} instances each, worst rel err: {summary}"),
        format!("rel err above {RTOL}: {bad:?}"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let spec = SearchSpaceSpec::default();
    let all = spec.enumerate();
    let distinct: HashSet<&Genome> = all.iter().collect();
    let invalid = all.iter().filter(|g| !spec.validate(g).is_empty()).count();
    let broken = all.iter().filter(|g| decode(&encode(g), &spec).ok().as_ref() != Some(*g)).count();
    check(
        all.len() == 2500 && distinct.len() == 2500 && invalid == 0 && broken == 0,
        "2500 distinct valid genomes, all round-trip".into(),
        format!("{} genomes, {} distinct, {invalid} invalid, {broken} fail to round-trip", all.len(), distinct.len()),
    )
}

// ---------------------------------------------------------------- criterion 3

/// Candidate prefixes (`enc0.c1.s2.conv3`) a genome selects, from genes alone.
fn active_candidates(net: &Network, g: &Genome) -> HashSet<String> {
    let live = g.live_cells();
    let mut out = HashSet::new();
    for (pos, _) in net.blocks() {
        for (ci, cell) in g.cells.iter().enumerate().filter(|(ci, _)| live[*ci]) {
            for (si, gene) in cell.subcells.iter().enumerate() {
                if gene.op.kernel().is_some() {
                    out.insert(format!("{}.c{}.s{}.{}", pos.label(), ci + 1, si + 1, gene.op.name()));
                }
            }
        }
    }
    out
}

fn candidate_prefix(name: &str) -> Option<String> {
    let parts: Vec<&str> = name.split('.').collect();
    (parts.len() >= 4 && parts[1].starts_with('c') && parts[2].starts_with('s')).then(|| parts[..4].join("."))
}

fn criterion_3() -> Outcome {
    let all = SearchSpaceSpec::default().enumerate();
    let mut r = rng::stream(3, "acceptance isolation");
    let mut checked = 0usize;
    for i in 0..50 {
        let rank = 1 + i % 2;
        let spec = SupernetSpec {
            n_stages: 2,
            base_channels: 4,
            ..SupernetSpec::default()
        }
        .with_rank(rank);
        let net = Network::supernet(spec, i as u64).map_err(|e| e.to_string())?;
        let g = all.choose(&mut r).unwrap().clone();
        let active = active_candidates(&net, &g);
        let shape: Vec<usize> = if rank == 1 { vec![2, 1, 8] } else { vec![2, 1, 8, 8] };
        let n: usize = shape.iter().product();
        let x = Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(x);
        let f = net
            .forward(&mut tape, &BlockDesign::Shared(g.clone()), x, NormMode::Train)
            .map_err(|e| e.to_string())?;
        let w: Vec<f32> = (0..tape.value(f.logits).len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let loss = tape.dot_const(f.logits, &w).unwrap();
        let grads = tape.backward(loss).map_err(|e| e.to_string())?;
        let mut seen = HashSet::new();
        for e in net.store.entries() {
            let Some(prefix) = candidate_prefix(&e.name) else { continue };
            let grad = grads.param(net.store.find(&e.name).unwrap());
            if active.contains(&prefix) {
                if e.kind == ParamKind::Trainable && grad.is_some() {
                    seen.insert(prefix);
                }
            } else {
                // an untouched parameter has no gradient entry, which counts as zero
                if grad.is_some_and(|t| t.data().iter().any(|&v| v != 0.0)) {
                    return Err(format!("{} off the path of {} has nonzero gradient", e.name, encode(&g)));
                }
                checked += 1;
            }
        }
        if seen != active {
            return Err(format!("on-path candidates {active:?} but gradients reached {seen:?}"));
        }
    }
    Ok(format!("50 genomes (ranks 1 and 2), {checked} off-path parameter tensors, all gradients exactly zero"))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let mut c = Controller::<f64>::new(SearchSpaceSpec::default(), ControllerConfig::default(), 4).unwrap();
    let mut r = rng::stream(4, "acceptance bandit");
    let hit = |g: &Genome| g.cells[1].subcells[0].op == OpKind::Conv5;
    for _ in 0..500 {
        let s = c.sample(&mut r);
        let reward = if hit(s.genome()) { 1.0 } else { 0.0 };
        c.reinforce_step(&[(s, reward)]).map_err(|e| e.to_string())?;
    }
    let n = 2000;
    let freq = (0..n).filter(|_| hit(c.sample(&mut r).genome())).count() as f64 / n as f64;
    check(
        freq > 0.9,
        format!("conv5 frequency after 500 steps: {freq:.3}"),
        format!("conv5 frequency after 500 steps: {freq:.3} (needs > 0.9)"),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let mut r = rng::stream(8, "acceptance dice");
    for case in 0..1000 {
        let n = r.random_range(1..64);
        let pred: Vec<u8> = (0..n).map(|_| r.random_range(0..4)).collect();
        let truth: Vec<u8> = (0..n).map(|_| r.random_range(0..4)).collect();
        let d = class_dice(&pred, &truth, 4).map_err(|e| e.to_string())?;
        for k in 0..4u8 {
            let p: BTreeSet<usize> = (0..n).filter(|&i| pred[i] == k).collect();
            let g: BTreeSet<usize> = (0..n).filter(|&i| truth[i] == k).collect();
            let brute = if p.is_empty() && g.is_empty() {
                1.0
            } else {
                2.0 * p.intersection(&g).count() as f64 / (p.len() + g.len()) as f64
            };
            if d[k as usize] != brute {
                return Err(format!("pair {case} class {k}: {} vs {brute}", d[k as usize]));
            }
        }
    }
    Ok("1000 label pairs, 4 classes each, exact agreement".into())
}

// ---------------------------------------------------- criteria 5, 6, 7 and 9

const SEED: &str = "0";

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_enas-unet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`enas-unet {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn eval_report(p: &Path) -> Result<EvalReport, String> {
    match read_report(p).map_err(|e| e.to_string())? {
        ReportFile::Eval(e) => Ok(e),
        _ => Err(format!("{} is not an eval report", p.display())),
    }
}

fn search_report(p: &Path) -> Result<SearchReport, String> {
    match read_report(p).map_err(|e| e.to_string())? {
        ReportFile::Search(r) => Ok(r),
        _ => Err(format!("{} is not a search report", p.display())),
    }
}

/// gen-data, desk search, train and eval for one rank.
struct Pipeline {
    data: PathBuf,
    genome: PathBuf,
    search: PathBuf,
}

fn gen_and_search(dir: &Path, rank: &str) -> Result<Pipeline, String> {
    let data = dir.join(format!("data{rank}d"));
    let genome = dir.join(format!("genome{rank}d.json"));
    let search = dir.join(format!("search{rank}d.json"));
    cli(&["gen-data", "--rank", rank, "--seed", SEED, "--out", s(&data)])?;
    cli(&[
        "search", "--data", s(&data), "--rank", rank, "--preset", "desk", "--seed", SEED, "--out", s(&genome),
        "--report", s(&search),
    ])?;
    Ok(Pipeline { data, genome, search })
}

/// Trains from a genome (with its search report) or a preset, then evaluates on test.
fn train_eval(dir: &Path, data: &Path, rank: &str, block: (&str, &Path), search: Option<&Path>, tag: &str) -> Result<PathBuf, String> {
    let ckpt = dir.join(format!("{tag}.ckpt"));
    let report = dir.join(format!("{tag}.eval.json"));
    let mut args = vec!["train", "--data", s(data), "--rank", rank, "--seed", SEED, "--out", s(&ckpt)];
    args.extend([block.0, s(block.1)]);
    if let Some(p) = search {
        args.extend(["--search-report", s(p)]);
    }
    cli(&args)?;
    cli(&["eval", "--data", s(data), "--ckpt", s(&ckpt), "--split", "test", "--out", s(&report)])?;
    Ok(report)
}

struct OneD {
    p: Pipeline,
    enas: PathBuf,
    baseline: PathBuf,
}

fn run_1d(dir: &Path) -> Result<OneD, String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let p = gen_and_search(dir, "1")?;
    let enas = train_eval(dir, &p.data, "1", ("--genome", &p.genome), Some(&p.search), "enas1d")?;
    let baseline = train_eval(dir, &p.data, "1", ("--preset", Path::new("baseline_resnet")), None, "resnet1d")?;
    Ok(OneD { p, enas, baseline })
}

fn criterion_5(one: &Result<OneD, String>) -> Outcome {
    let one = one.as_ref().map_err(Clone::clone)?;
    let enas = eval_report(&one.enas)?.dice;
    let base = eval_report(&one.baseline)?.dice;
    let msg = format!(
        "ENAS 1D {:.4} ± {:.4} vs ResNet 1D {:.4} ± {:.4} (margin 0.02)",
        enas.mean, enas.std_over_volumes, base.mean, base.std_over_volumes
    );
    check(enas.mean >= base.mean - 0.02, msg.clone(), msg)
}

struct TwoD {
    p: Pipeline,
    lifted: PathBuf,
    direct: PathBuf,
}

fn run_2d(dir: &Path, one: &Result<OneD, String>) -> Result<TwoD, String> {
    let one = one.as_ref().map_err(Clone::clone)?;
    let p = gen_and_search(dir, "2")?;
    let lifted = train_eval(dir, &p.data, "2", ("--genome", &one.p.genome), Some(&one.p.search), "enas1d_to_2d")?;
    let direct = train_eval(dir, &p.data, "2", ("--genome", &p.genome), Some(&p.search), "enas2d")?;
    Ok(TwoD { p, lifted, direct })
}

fn criterion_6(two: &Result<TwoD, String>) -> Outcome {
    let two = two.as_ref().map_err(Clone::clone)?;
    let lifted = eval_report(&two.lifted)?.dice;
    let direct = eval_report(&two.direct)?.dice;
    let msg = format!(
        "ENAS 1D→2D {:.4} ± {:.4} vs ENAS 2D {:.4} ± {:.4} (tolerance 0.02)",
        lifted.mean, lifted.std_over_volumes, direct.mean, direct.std_over_volumes
    );
    check((lifted.mean - direct.mean).abs() <= 0.02, msg.clone(), msg)
}

fn criterion_7(dir: &Path, one: &Result<OneD, String>, two: &Result<TwoD, String>) -> Outcome {
    let one = one.as_ref().map_err(Clone::clone)?;
    let two = two.as_ref().map_err(Clone::clone)?;
    let r1 = search_report(&one.p.search)?;
    let r2 = search_report(&two.p.search)?;
    let same_schedule = r1.result.schedule == r2.result.schedule;
    let same_scans = enas_unet::core::datagen::GenConfig { rank: 2, ..r1.data } == r2.data;
    if !same_schedule || !same_scans {
        return Err("the two searches differ in schedule or source B-scans".into());
    }
    // the table written here carries the measured ratio
    let mut inputs = vec![s(&one.p.search), s(&two.p.search), s(&one.enas), s(&one.baseline), s(&two.lifted), s(&two.direct)];
    let table = dir.join("table");
    inputs.insert(0, "--inputs");
    let mut args = vec!["report"];
    args.extend(inputs);
    args.extend(["--out", s(&table)]);
    cli(&args)?;
    let (t1, t2) = (r1.result.wall_clock_seconds, r2.result.wall_clock_seconds);
    let ratio = t1 / t2;
    let msg = format!(
        "search 1D {t1:.1} s, 2D {t2:.1} s, ratio {ratio:.3} (reduction {:.1}%), table in {}",
        100.0 * (1.0 - ratio),
        table.display()
    );
    check(ratio <= 0.5, msg.clone(), msg)
}

fn criterion_9(dir: &Path, first: &Result<OneD, String>) -> Outcome {
    let first = first.as_ref().map_err(Clone::clone)?;
    let second = run_1d(dir)?;
    let pairs = [
        (&first.p.genome, &second.p.genome),
        (&first.enas, &second.enas),
        (&first.baseline, &second.baseline),
    ];
    let mut differ = Vec::new();
    for (a, b) in pairs {
        let (x, y) = (std::fs::read(a).map_err(|e| e.to_string())?, std::fs::read(b).map_err(|e| e.to_string())?);
        if x != y {
            differ.push(a.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    check(
        differ.is_empty(),
        "rerun of the 1D pipeline: genome and both dice reports byte-identical".into(),
        format!("rerun differs in {differ:?}"),
    )
}

// ----------------------------------------------------------------------------

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| wanted.is_empty() || wanted.contains(&n);

    let kept = std::env::var_os("ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = kept.clone().unwrap_or_else(|| tmp.path().to_path_buf());
    if root.exists() && kept.is_some() {
        // a fresh tree each run; only remove what this suite writes
        for sub in ["run1", "run2"] {
            let _ = std::fs::remove_dir_all(root.join(sub));
        }
    }

    let mut failed = 0;
    let mut report = |n: usize, started: Instant, o: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match o {
            Ok(m) => println!("criterion {n}: PASS ({secs:.1} s) {m}"),
            Err(m) => {
                failed += 1;
                println!("criterion {n}: FAIL ({secs:.1} s) {m}")
            }
        }
    };

    for (n, f) in [(1, criterion_1 as fn() -> Outcome), (2, criterion_2), (3, criterion_3), (4, criterion_4), (8, criterion_8)] {
        if on(n) {
            let t = Instant::now();
            report(n, t, f());
        }
    }

    let need_1d = [5, 6, 7, 9].into_iter().any(on);
    let need_2d = [6, 7].into_iter().any(on);
    if need_1d {
        let t = Instant::now();
        let one = run_1d(&root.join("run1"));
        if on(5) {
            report(5, t, criterion_5(&one));
        }
        if need_2d {
            let t = Instant::now();
            let two = run_2d(&root.join("run1"), &one);
            if on(6) {
                report(6, t, criterion_6(&two));
            }
            if on(7) {
                report(7, Instant::now(), criterion_7(&root.join("run1"), &one, &two));
            }
        }
        if on(9) {
            let t = Instant::now();
            report(9, t, criterion_9(&root.join("run2"), &one));
        }
    }

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
