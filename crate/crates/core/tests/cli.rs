use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use tata::io::{read_raw, write_embedding_file, EmbeddingFile, FileKind, Manifest};

fn tata(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tata"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn tata")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn exported(per_class: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = tata(
        dir.path(),
        &["export-fixtures", "--out", "fx", "--per-class", per_class],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

const RUN: [&str; 9] = [
    "run",
    "--images",
    "fx/shifted.tata",
    "--nouns",
    "fx/nouns.tata",
    "--attributes",
    "fx/attributes.tata",
    "--encoder",
    "fx/prompts.tata",
];

fn run_with(dir: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<&str> = RUN.to_vec();
    args.extend_from_slice(extra);
    tata(dir, &args)
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn export_writes_every_file_with_manifest() {
    let dir = exported("5");
    for name in ["source", "shifted", "nouns", "attributes", "prompts"] {
        let path = dir.path().join("fx").join(format!("{name}.tata"));
        let file = read_raw(&path).unwrap();
        assert!(file.manifest.count > 0, "{name}");
        assert_eq!(file.rows.len(), file.manifest.count);
        assert!(dir
            .path()
            .join("fx")
            .join(format!("{name}.tata.json"))
            .exists());
    }
    let shifted = read_raw(&dir.path().join("fx/shifted.tata"))
        .unwrap()
        .manifest;
    assert_eq!(shifted.count, 50);
    assert_eq!(shifted.class_names.as_ref().unwrap().len(), 10);
    assert_eq!(shifted.labels.as_ref().unwrap().len(), 50);
}

#[test]
fn run_writes_predictions_and_summary() {
    let dir = exported("6");
    let o = run_with(dir.path(), &["--out", "pred.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let preds = lines(&dir.path().join("pred.jsonl"));
    assert_eq!(preds.len(), 60);
    for p in &preds {
        let probs: Vec<f64> = p["probs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        assert_eq!(probs.len(), 10);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p["class"].as_str().unwrap().starts_with("class"));
        assert!(p["label"].is_u64());
    }
    let summary: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("pred.jsonl.summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["count"], 60);
    assert_eq!(summary["labeled"], 60);
    assert_eq!(summary["skipped"], 0);
    let printed: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(printed, summary);
}

#[test]
fn flags_change_the_outcome() {
    let dir = exported("6");
    let full = run_with(dir.path(), &["--out", "full.jsonl"]);
    let zero = run_with(dir.path(), &["--toggle", "none", "--out", "zero.jsonl"]);
    assert!(full.status.success() && zero.status.success());
    let zero_preds = lines(&dir.path().join("zero.jsonl"));
    assert!(zero_preds.iter().all(|p| p["soft_voted"] == false));
    assert_ne!(
        std::fs::read(dir.path().join("full.jsonl")).unwrap(),
        std::fs::read(dir.path().join("zero.jsonl")).unwrap()
    );
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = exported("4");
    std::fs::write(
        dir.path().join("cfg.toml"),
        "theta = 2.0\nmode = \"streaming\"\nwarmup = 10\n",
    )
    .unwrap();
    let o = run_with(dir.path(), &["--config", "cfg.toml", "--out", "a.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(s["admissions"], 0);
    let o = run_with(
        dir.path(),
        &["--config", "cfg.toml", "--theta", "0.0", "--out", "b.jsonl"],
    );
    let s: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(s["admissions"].as_u64().unwrap() > 0);
}

#[test]
fn invalid_config_exits_one_and_names_the_field() {
    let dir = exported("3");
    let o = run_with(dir.path(), &["--tau", "0", "--out", "x.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("tau"), "{}", stderr(&o));

    std::fs::write(dir.path().join("bad.toml"), "tua = 0.1\n").unwrap();
    let o = run_with(dir.path(), &["--config", "bad.toml", "--out", "x.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("tua"), "{}", stderr(&o));
}

#[test]
fn missing_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = tata(
        dir.path(),
        &[
            "run",
            "--images",
            "nope.tata",
            "--encoder",
            "nope.cache",
            "--out",
            "x",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn malformed_rows_are_skipped_and_counted() {
    let dir = exported("3");
    let src = read_raw(&dir.path().join("fx/shifted.tata")).unwrap();
    let mut rows = src.rows.clone();
    rows[0] = vec![0.0; src.manifest.dim];
    rows[1][2] = f32::NAN;
    write_embedding_file(
        &dir.path().join("broken.tata"),
        &EmbeddingFile {
            manifest: src.manifest.clone(),
            rows,
        },
    )
    .unwrap();
    let o = tata(
        dir.path(),
        &[
            "run",
            "--images",
            "broken.tata",
            "--toggle",
            "none",
            "--encoder",
            "fx/prompts.tata",
            "--out",
            "p.jsonl",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let s: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(s["skipped"], 2);
    assert_eq!(s["count"], 28);
}

#[test]
fn run_needs_class_names() {
    let dir = exported("3");
    let src = read_raw(&dir.path().join("fx/shifted.tata")).unwrap();
    let manifest = Manifest::new(FileKind::Images, src.manifest.ids.clone(), src.manifest.dim);
    write_embedding_file(
        &dir.path().join("bare.tata"),
        &EmbeddingFile {
            manifest,
            rows: src.rows,
        },
    )
    .unwrap();
    let o = tata(
        dir.path(),
        &[
            "run",
            "--images",
            "bare.tata",
            "--encoder",
            "fx/prompts.tata",
            "--out",
            "p",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn cluster_reports_agreement_with_labels() {
    let dir = exported("10");
    let o = tata(
        dir.path(),
        &["cluster", "--images", "fx/source.tata", "--out", "c.jsonl"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(report["clusters"], 10);
    assert_eq!(
        report["sizes"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap())
            .sum::<u64>(),
        100
    );
    assert!(report["adjusted_rand_index"].as_f64().unwrap() > 0.3);
    let assigned = lines(&dir.path().join("c.jsonl"));
    assert_eq!(assigned.len(), 100);
    assert!(assigned.iter().all(|a| a["cluster"].as_u64().unwrap() < 10));

    let o = tata(
        dir.path(),
        &[
            "cluster",
            "--images",
            "fx/source.tata",
            "--n",
            "3",
            "--out",
            "c3.jsonl",
        ],
    );
    let report: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(report["clusters"], 3);
}

#[test]
fn bdc_selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = tata(dir.path(), &["bdc-selftest", "--trials", "20"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.lines().count() >= 5);
    assert!(out.lines().all(|l| l.starts_with("PASS ")), "{out}");
}

#[test]
fn exec_endpoint_serves_the_prompt_cache() {
    let dir = exported("4");
    let cache = dir.path().join("fx/prompts.tata");
    let endpoint = format!(
        "exec:{} serve --cache {}",
        env!("CARGO_BIN_EXE_tata"),
        cache.display()
    );
    let local = run_with(dir.path(), &["--out", "local.jsonl"]);
    let mut args: Vec<&str> = RUN[..7].to_vec();
    args.extend_from_slice(&["--encoder", &endpoint, "--out", "remote.jsonl"]);
    let remote = tata(dir.path(), &args);
    assert!(
        local.status.success() && remote.status.success(),
        "{}",
        stderr(&remote)
    );
    let (a, b) = (
        lines(&dir.path().join("local.jsonl")),
        lines(&dir.path().join("remote.jsonl")),
    );
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x["pred"], y["pred"]);
    }
}
