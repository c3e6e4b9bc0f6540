use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn tppsd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tppsd"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tppsd(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn column<'a>(header: &[String], rows: &'a [Vec<String>], name: &str) -> Vec<&'a str> {
    let i = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[i].as_str()).collect()
}

fn layered(dir: &Path, noise: &str) {
    ok(
        dir,
        &[
            "init", "layered-pair", "--embed-dim", "8", "--components", "2", "--marks", "2",
            "--target-layers", "4", "--noise", noise, "--target-out", "t.json", "--draft-out", "d.json",
        ],
    );
}

#[test]
fn simulate_paper_poisson_writes_a_thousand_records() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["simulate", "--preset", "poisson", "--n", "1000", "--t-end", "100", "--out", "p.jsonl"]);
    let text = fs::read_to_string(dir.path().join("p.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 1000);
    assert!(dir.path().join("p.manifest.json").exists());
}

#[test]
fn simulate_rejects_zero_sequences_as_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = tppsd(dir.path(), &["simulate", "--preset", "hawkes", "--n", "0", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n must be ≥ 1"));
}

#[test]
fn simulate_is_byte_identical_under_a_seed() {
    let dir = TempDir::new().unwrap();
    for name in ["a.jsonl", "b.jsonl"] {
        ok(dir.path(), &["simulate", "--preset", "multi-hawkes", "--n", "5", "--t-end", "30", "--seed", "9", "--out", name]);
    }
    assert_eq!(fs::read(dir.path().join("a.jsonl")).unwrap(), fs::read(dir.path().join("b.jsonl")).unwrap());
}

#[test]
fn process_file_and_preset_agree() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["init", "process", "--preset", "hawkes", "--out", "h.json"]);
    ok(dir.path(), &["simulate", "--process", "h.json", "--n", "3", "--t-end", "20", "--out", "a.jsonl"]);
    ok(dir.path(), &["simulate", "--preset", "hawkes", "--n", "3", "--t-end", "20", "--out", "b.jsonl"]);
    assert_eq!(fs::read(dir.path().join("a.jsonl")).unwrap(), fs::read(dir.path().join("b.jsonl")).unwrap());
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(tppsd(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(tppsd(dir.path(), &["simulate", "--out", "x.jsonl"]).status.code(), Some(1));
    assert_eq!(
        tppsd(dir.path(), &["simulate", "--preset", "poisson", "--process", "p.json", "--out", "x"]).status.code(),
        Some(1)
    );
}

#[test]
fn train_reports_missing_data_with_its_path() {
    let dir = TempDir::new().unwrap();
    let out = tppsd(dir.path(), &["train", "--data", "nowhere.jsonl", "--model-config", "m.json", "--out", "c.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.jsonl"));
}

#[test]
fn train_is_reproducible_and_splits_in_order() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    ok(p, &["simulate", "--preset", "hawkes", "--n", "20", "--t-end", "4", "--out", "d.jsonl"]);
    ok(p, &["init", "model-config", "--embed-dim", "4", "--components", "2", "--out", "m.json"]);
    fs::write(p.join("tc.json"), r#"{"max_epochs": 2, "patience": 2, "batch_size": 8}"#).unwrap();
    let mut stdout = String::new();
    for name in ["c1.json", "c2.json"] {
        stdout = ok(p, &["train", "--data", "d.jsonl", "--model-config", "m.json", "--train-config", "tc.json", "--seed", "3", "--out", name]);
    }
    assert!(stdout.contains("split 16/2/2"), "{stdout}");
    assert_eq!(fs::read(p.join("c1.json")).unwrap(), fs::read(p.join("c2.json")).unwrap());
    let (header, rows) = table(&p.join("c1.epochs.csv"));
    assert_eq!(header, ["epoch", "train_loglik", "val_loglik"]);
    assert_eq!(rows.len(), 2);
}

#[test]
fn sd_sampling_needs_a_draft() {
    let dir = TempDir::new().unwrap();
    layered(dir.path(), "0");
    let out = tppsd(dir.path(), &["sample", "--mode", "sd", "--target", "t.json", "--out", "s.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sample_tables_carry_acceptance_and_timings() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    layered(p, "0");
    ok(p, &["sample", "--mode", "sd", "--target", "t.json", "--draft", "d.json", "--t-end", "10", "--runs", "2", "--out", "sd.jsonl"]);
    let (h, rows) = table(&p.join("sd.stats.csv"));
    assert_eq!(column(&h, &rows, "gamma"), ["10", "10"]);
    assert_eq!(column(&h, &rows, "alpha"), ["1", "1"]);
    assert!(column(&h, &rows, "t_sd").iter().all(|t| t.parse::<f64>().unwrap() >= 0.0));
    ok(p, &["sample", "--mode", "ar", "--target", "t.json", "--t-end", "10", "--out", "ar.jsonl"]);
    let (h, rows) = table(&p.join("ar.stats.csv"));
    assert_eq!(rows.len(), 1);
    assert!(column(&h, &rows, "t_ar")[0].parse::<f64>().is_ok());
}

#[test]
fn ks_passes_on_thinning_output() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let mut passes = 0;
    for seed in ["1", "2", "3"] {
        ok(p, &["simulate", "--preset", "hawkes", "--n", "50", "--t-end", "100", "--seed", seed, "--out", "h.jsonl"]);
        ok(p, &["eval", "ks", "--data", "h.jsonl", "--preset", "hawkes", "--out", "ks.csv"]);
        let (h, rows) = table(&p.join("ks.csv"));
        passes += usize::from(column(&h, &rows, "pass") == ["true"]);
        let n: usize = column(&h, &rows, "n")[0].parse().unwrap();
        let (h, rows) = table(&p.join("ks.plot.csv"));
        assert_eq!(h, ["model_cdf", "empirical_cdf"]);
        assert_eq!(rows.len(), n);
    }
    assert!(passes >= 2, "{passes} of 3 seeds passed");
}

#[test]
fn loglik_of_identical_scorers_is_zero() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    ok(p, &["simulate", "--preset", "poisson", "--n", "3", "--t-end", "10", "--out", "d.jsonl"]);
    ok(p, &["init", "process", "--preset", "poisson", "--out", "p.json"]);
    ok(p, &["eval", "loglik", "--data", "d.jsonl", "--scorer-a", "p.json", "--scorer-b", "p.json", "--out", "l.csv"]);
    let (h, rows) = table(&p.join("l.csv"));
    assert_eq!(column(&h, &rows, "delta_loglik"), ["0"]);
    ok(p, &["init", "model", "--embed-dim", "4", "--components", "2", "--out", "m.json"]);
    ok(p, &["eval", "loglik", "--data", "d.jsonl", "--scorer-a", "m.json", "--scorer-b", "p.json", "--out", "l2.csv"]);
    let (h, rows) = table(&p.join("l2.csv"));
    assert!(column(&h, &rows, "delta_loglik")[0].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn wasserstein_follows_the_history_protocol() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    layered(p, "0.2");
    ok(p, &["sample", "--mode", "ar", "--target", "t.json", "--t-end", "30", "--runs", "3", "--out", "h.jsonl"]);
    ok(p, &[
        "eval", "wasserstein", "--target", "t.json", "--draft", "d.json", "--history", "h.jsonl",
        "--m-hist", "5", "--repetitions", "40", "--gamma", "4", "--out", "w.csv",
    ]);
    let (h, rows) = table(&p.join("w.csv"));
    assert_eq!(h, ["sequence", "ws_time", "emd_mark"]);
    assert!(!rows.is_empty());
    let out = tppsd(p, &["eval", "wasserstein", "--target", "t.json", "--history", "h.jsonl", "--m-hist", "100000", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn default_gamma_grid_gives_six_rows_with_full_acceptance_on_identical_models() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    layered(p, "0");
    ok(p, &["bench", "--target", "t.json", "--draft", "d.json", "--t-end", "10", "--m-hist", "5", "--draws", "20", "--out", "b.csv"]);
    let (h, rows) = table(&p.join("b.csv"));
    assert_eq!(h, tppsd_cli::commands::BENCH_COLUMNS);
    assert_eq!(column(&h, &rows, "gamma"), ["1", "5", "10", "20", "40", "60"]);
    assert!(column(&h, &rows, "alpha").iter().all(|a| *a == "1"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("b.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"]["bench"]["repetitions"], 3);
    assert!(manifest["timings"]["t_ar"].as_f64().unwrap() > 0.0);
}

#[test]
fn replay_reproduces_outputs_and_detects_changed_inputs() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    layered(p, "0.3");
    ok(p, &["sample", "--mode", "sd", "--target", "t.json", "--draft", "d.json", "--t-end", "10", "--runs", "2", "--out", "s.jsonl"]);
    let stdout = ok(p, &["replay", "s.manifest.json", "--out-dir", "again"]);
    assert_eq!(stdout.matches("identical").count(), 2, "{stdout}");
    assert_eq!(fs::read(p.join("s.jsonl")).unwrap(), fs::read(p.join("again/s.jsonl")).unwrap());
    fs::write(p.join("d.json"), fs::read_to_string(p.join("t.json")).unwrap()).unwrap();
    let out = tppsd(p, &["replay", "s.manifest.json", "--out-dir", "third"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_version_mismatch_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    ok(p, &["init", "model", "--embed-dim", "4", "--components", "2", "--out", "m.json"]);
    let text = fs::read_to_string(p.join("m.json")).unwrap().replacen("\"format_version\": 1", "\"format_version\": 7", 1);
    fs::write(p.join("m.json"), text).unwrap();
    let out = tppsd(p, &["sample", "--mode", "ar", "--target", "m.json", "--t-end", "1", "--out", "s.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}
