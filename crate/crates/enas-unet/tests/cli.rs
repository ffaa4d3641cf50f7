use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enas-unet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

#[track_caller]
fn ok(args: &[&str]) -> Output {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[track_caller]
fn fails(args: &[&str], code: i32) -> String {
    let out = bin(args);
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(out.status.code(), Some(code), "{args:?}:\n{err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small rank-1 dataset: 2 B-scans of width 16 per split.
fn tiny(root: &Path, rank: &str) -> PathBuf {
    let d = root.join(format!("data{rank}"));
    ok(&[
        "gen-data", "--rank", rank, "--depth", "16", "--width", "16", "--splits", "2,2,1,2", "--seed", "3", "--out",
        s(&d),
    ]);
    d
}

fn tiny_search(root: &Path, data: &Path, rank: &str, tag: &str) -> (PathBuf, PathBuf) {
    let genome = root.join(format!("{tag}.genome.json"));
    let report = root.join(format!("{tag}.json"));
    ok(&[
        "search", "--data", s(data), "--rank", rank, "--preset", "desk", "--epochs", "1", "--supernet-steps", "2",
        "--controller-steps", "2", "--samples", "3", "--out", s(&genome), "--report", s(&report),
    ]);
    (genome, report)
}

#[test]
fn gen_data_defaults_and_overwrite_guard() {
    let t = TempDir::new().unwrap();
    let d = t.path().join("d");
    ok(&["gen-data", "--depth", "16", "--width", "16", "--out", s(&d)]);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(m["counts"], serde_json::json!([60, 24, 2, 24]));
    assert_eq!(m["rank"], 2);
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["status"], "succeeded");

    let err = fails(&["gen-data", "--depth", "16", "--width", "16", "--out", s(&d)], 1);
    assert!(err.contains("--force"), "{err}");
    ok(&["gen-data", "--depth", "16", "--width", "16", "--seed", "1", "--out", s(&d), "--force"]);

    // a directory the tool did not write is never replaced
    let foreign = t.path().join("mine");
    std::fs::create_dir(&foreign).unwrap();
    std::fs::write(foreign.join("notes.txt"), "keep").unwrap();
    fails(&["gen-data", "--out", s(&foreign), "--force"], 1);
    assert!(foreign.join("notes.txt").exists());
}

#[test]
fn same_seed_writes_identical_bytes() {
    let t = TempDir::new().unwrap();
    let a = tiny(t.path(), "1");
    let b = t.path().join("again");
    ok(&[
        "gen-data", "--rank", "1", "--depth", "16", "--width", "16", "--splits", "2,2,1,2", "--seed", "3", "--out",
        s(&b),
    ]);
    for rel in ["dataset.json", "test/00017/intensity.dten", "train/00000/labels.dten", "val/00003/meta.json"] {
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn usage_errors_exit_1() {
    fails(&["train", "--rank", "1", "--data", "x", "--out", "y"], 1);
    fails(&["gen-data", "--rank", "3", "--out", "x"], 1);
    fails(&["eval", "--data", "x", "--ckpt", "y", "--out", "z", "--split", "holdout"], 1);
    fails(&["gen-data", "--splits", "1,2", "--out", "x"], 1);
    assert!(bin(&["--help"]).status.success());
}

#[test]
fn malformed_genome_exits_2_with_position() {
    let t = TempDir::new().unwrap();
    let data = tiny(t.path(), "1");
    let g = t.path().join("g.json");
    std::fs::write(&g, "{\"cells\": [\n  {\"subcells\": [}\n]}").unwrap();
    let ckpt = t.path().join("ck");
    let err = fails(&["train", "--data", s(&data), "--rank", "1", "--genome", s(&g), "--out", s(&ckpt)], 2);
    assert!(err.contains("line 2"), "{err}");

    // valid JSON, invalid genome
    std::fs::write(&g, r#"{"cells":[{"subcells":[{"input":5,"op":"conv3"}]}]}"#).unwrap();
    fails(&["train", "--data", s(&data), "--rank", "1", "--genome", s(&g), "--out", s(&ckpt)], 2);
    assert!(!ckpt.join("checkpoint.json").exists());
}

#[test]
fn missing_dataset_exits_2() {
    let t = TempDir::new().unwrap();
    let out = t.path().join("o");
    fails(
        &["train", "--data", s(&t.path().join("nope")), "--rank", "1", "--preset", "baseline_resnet", "--out", s(&out)],
        2,
    );
}

#[test]
fn divergence_exits_3() {
    let t = TempDir::new().unwrap();
    let data = tiny(t.path(), "1");
    let err = fails(
        &[
            "train", "--data", s(&data), "--rank", "1", "--preset", "baseline_resnet", "--epochs", "2", "--lr", "1e38",
            "--out", s(&t.path().join("ck")),
        ],
        3,
    );
    assert!(err.contains("divergence"), "{err}");
}

#[test]
fn pipeline_and_report() {
    let t = TempDir::new().unwrap();
    let root = t.path();
    let d1 = tiny(root, "1");
    let d2 = tiny(root, "2");
    let (genome, rep1) = tiny_search(root, &d1, "1", "search1");
    let (_, rep2) = tiny_search(root, &d2, "2", "search2");
    assert!(root.join("search1.run.json").exists());

    let enas = root.join("enas");
    ok(&[
        "train", "--data", s(&d1), "--rank", "1", "--genome", s(&genome), "--search-report", s(&rep1), "--epochs", "1",
        "--out", s(&enas),
    ]);
    // the same genome retrained in 2D
    let lifted = root.join("lifted");
    ok(&[
        "train", "--data", s(&d2), "--rank", "2", "--genome", s(&genome), "--search-report", s(&rep1), "--epochs", "1",
        "--out", s(&lifted),
    ]);
    let e1 = root.join("eval1.json");
    let e2 = root.join("eval2.json");
    ok(&["eval", "--data", s(&d1), "--ckpt", s(&enas), "--out", s(&e1)]);
    ok(&["eval", "--data", s(&d2), "--ckpt", s(&lifted), "--out", s(&e2)]);

    let err = fails(&["eval", "--data", s(&d2), "--ckpt", s(&enas), "--out", s(&root.join("x.json"))], 2);
    assert!(err.contains("rank"), "{err}");

    let ev: serde_json::Value = serde_json::from_slice(&std::fs::read(&e2).unwrap()).unwrap();
    assert_eq!(ev["kind"], "eval");
    assert_eq!(ev["model"], "ENAS U-Net 1D→2D");
    let dice = ev["dice"]["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&dice));

    let out = root.join("tables");
    let stdout = ok(&[
        "report", "--inputs", s(&rep1), s(&rep2), s(&e1), s(&e2), "--out", s(&out),
    ])
    .stdout;
    assert!(!stdout.is_empty());
    let mut table = csv::Reader::from_path(out.join("table.csv")).unwrap();
    let headers = table.headers().unwrap().clone();
    let ratio_col = headers.iter().position(|h| h == "search_time_ratio").unwrap();
    let rows: Vec<csv::StringRecord> = table.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    // the rank-2 search is the reference
    assert_eq!(rows[1][ratio_col].parse::<f64>().unwrap(), 1.0);
    let r1: f64 = rows[0][ratio_col].parse().unwrap();
    assert!(r1 > 0.0);
    // both trained models come from the rank-1 search
    assert_eq!(rows[2][ratio_col], rows[0][ratio_col]);
    assert_eq!(rows[3][ratio_col], rows[0][ratio_col]);
    let curves = csv::Reader::from_path(out.join("curves.csv")).unwrap().into_records().count();
    assert_eq!(curves, 2);

    // reports built on different data are refused
    let other = root.join("other");
    ok(&[
        "gen-data", "--rank", "1", "--depth", "16", "--width", "16", "--splits", "2,2,1,2", "--seed", "4", "--out",
        s(&other),
    ]);
    let (_, rep_other) = tiny_search(root, &other, "1", "other");
    fails(&["report", "--inputs", s(&rep1), s(&rep_other), "--out", s(&out)], 2);
}

#[test]
fn one_desk_epoch_of_rank_1_search_is_fast() {
    let t = TempDir::new().unwrap();
    let d = t.path().join("d");
    ok(&["gen-data", "--rank", "1", "--out", s(&d)]);
    let start = Instant::now();
    ok(&[
        "search", "--data", s(&d), "--rank", "1", "--preset", "desk", "--epochs", "1", "--out",
        s(&t.path().join("g.json")), "--report", s(&t.path().join("r.json")),
    ]);
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "one desk epoch took {secs:.1} s");
}
