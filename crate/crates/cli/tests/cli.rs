use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn cotdyn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotdyn")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, json).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn read_csv(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(p).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

const SMALL: &str = r#"{"n_traj": 40, "steps": 30, "rank": 4, "n_regimes": 2, "min_jump": 0.0}"#;

/// Runs `synth` into `dir/synth` and returns the trajectory file.
fn synth(dir: &Path, config: &str, seed: &str) -> PathBuf {
    let cfg = write_config(dir, &format!("synth-{seed}.json"), config);
    let out = dir.join(format!("synth-{seed}"));
    let o = cotdyn(&["synth", "--config", path_str(&cfg), "--seed", seed, "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join("trajectories.jsonl")
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cotdyn(&[])), 1);
    assert_eq!(code(&cotdyn(&["frobnicate"])), 1);
    assert_eq!(code(&cotdyn(&["--help"])), 0);
    assert_eq!(code(&cotdyn(&["pipeline", "--out", path_str(dir.path())])), 1);
    assert_eq!(code(&cotdyn(&["synth", "--threads", "0", "--out", path_str(dir.path())])), 1);
    let bad = write_config(dir.path(), "bad.json", r#"{"rnak": 3}"#);
    let o = cotdyn(&["synth", "--config", path_str(&bad), "--out", path_str(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("rnak"));
    let invalid = write_config(dir.path(), "invalid.json", r#"{"test_fraction": 1.5}"#);
    let data = synth(dir.path(), SMALL, "0");
    let o = cotdyn(&["pipeline", "--config", path_str(&invalid), "--input", path_str(&data), "--out", path_str(dir.path())]);
    assert_eq!(code(&o), 1);
}

#[test]
fn data_errors_exit_two_with_stage() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let o = cotdyn(&["pipeline", "--input", path_str(&missing), "--out", path_str(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("load:"));
    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"id\": \"a\", \"model\": \"m\", \"task\": \"t\", \"states\": [[1.0], [2.0]]}\nnot json\n").unwrap();
    let o = cotdyn(&["pipeline", "--input", path_str(&broken), "--out", path_str(dir.path())]);
    assert_eq!(code(&o), 2);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("load:") && stderr.contains("line 2"), "{stderr}");
}

#[test]
fn synth_output_round_trips_with_expected_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), r#"{"n_traj": 12, "steps": 25, "dim": 10}"#, "5");
    let text = std::fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 12);
    let set = cotdyn::trajectories::load_trajectories(&data, cotdyn::trajectories::Format::Jsonl).unwrap();
    assert_eq!(set.n_transitions(), 12 * 25);
    assert_eq!(set.dim(), 10);
    let truth = read_json(&data.with_file_name("ground_truth.json"));
    assert!(truth.is_object());
    assert!(data.with_file_name("ground_truth_basis.json").exists());
}

#[test]
fn single_regime_pipeline_equals_no_regime_variant() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), SMALL, "1");
    let mut slds = Vec::new();
    for (name, variant) in [("k1", "full"), ("nr", "no_regime")] {
        let cfg = write_config(
            dir.path(),
            &format!("{name}.json"),
            &format!(r#"{{"rank": 4, "n_regimes": 1, "min_jump": 0.0, "variant": "{variant}"}}"#),
        );
        let out = dir.path().join(name);
        let o = cotdyn(&["pipeline", "--config", path_str(&cfg), "--input", path_str(&data), "--out", path_str(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        slds.push(read_json(&out.join("report.json"))["slds"].clone());
    }
    assert_eq!(slds[0], slds[1]);
}

#[test]
fn pipeline_reports_slds_above_ridge_and_ablation_has_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), SMALL, "2");
    let cfg = write_config(dir.path(), "run.json", SMALL);
    let out = dir.path().join("run");
    let o = cotdyn(&["pipeline", "--config", path_str(&cfg), "--input", path_str(&data), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0);
    let report = read_json(&out.join("report.json"));
    assert!(report["slds"]["r2"].as_f64().unwrap() > report["ridge_r2"].as_f64().unwrap());
    for name in ["basis.json", "ridge.json", "gmm.json", "slds.json", "ll_trace.csv", "residuals.csv", "regimes.csv", "posteriors.csv", "bic.csv", "jump_cdf.csv"] {
        assert!(out.join(name).exists(), "{name}");
    }

    let o = cotdyn(&["ablate", "--config", path_str(&cfg), "--input", path_str(&data), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0);
    let (header, rows) = read_csv(&out.join("ablation.csv"));
    assert_eq!(header, ["variant", "r2", "nll"]);
    assert_eq!(rows.len(), 5);
    let r2 = |v: &str| rows.iter().find(|r| r[0] == v).unwrap()[1].parse::<f64>().unwrap();
    assert!(r2("full") > r2("no_state_drift"));
}

#[test]
fn single_regime_data_gives_matching_full_and_no_regime_fits() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), r#"{"n_traj": 60, "steps": 40, "n_regimes": 1}"#, "3");
    let cfg = write_config(dir.path(), "run.json", r#"{"rank": 4, "n_regimes": 2, "min_jump": 0.0}"#);
    let out = dir.path().join("ablate");
    let o = cotdyn(&["ablate", "--config", path_str(&cfg), "--input", path_str(&data), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (_, rows) = read_csv(&out.join("ablation.csv"));
    let r2 = |v: &str| rows.iter().find(|r| r[0] == v).unwrap()[1].parse::<f64>().unwrap();
    assert!((r2("full") - r2("no_regime")).abs() <= 0.02, "{rows:?}");
}

#[test]
fn transfer_with_no_test_sets_writes_an_empty_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), SMALL, "4");
    let cfg = write_config(dir.path(), "run.json", SMALL);
    let out = dir.path().join("t");
    let o = cotdyn(&["transfer", "--config", path_str(&cfg), "--input", path_str(&data), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0);
    let (header, rows) = read_csv(&out.join("transfer.csv"));
    assert_eq!(header, ["train_tag", "test_tag", "r2", "nll"]);
    assert!(rows.is_empty());

    let wide = synth(dir.path(), r#"{"n_traj": 10, "steps": 10, "dim": 12}"#, "6");
    let o = cotdyn(&["transfer", "--config", path_str(&cfg), "--input", path_str(&data), "--test", path_str(&wide), "--out", path_str(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn langevin_outputs_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "lv.json",
        r#"{"steps": 100000, "chains": 2, "series_len": 200, "arrhenius_d": [0.2, 0.3, 0.5]}"#,
    );
    let out = dir.path().join("lv");
    let o = cotdyn(&["langevin", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out.join("density.csv"));
    assert_eq!(header, ["x", "analytic", "empirical"]);
    let col = |i: usize| rows.iter().map(|r| r[i].parse::<f64>().unwrap()).collect::<Vec<_>>();
    let (x, p) = (col(0), col(1));
    for i in 0..p.len() {
        assert!((p[i] - p[p.len() - 1 - i]).abs() < 1e-9);
        assert!((x[i] + x[x.len() - 1 - i]).abs() < 1e-9);
    }
    let integral: f64 = (1..x.len()).map(|i| 0.5 * (x[i] - x[i - 1]) * (p[i] + p[i - 1])).sum();
    assert!((integral - 1.0).abs() < 1e-6, "{integral}");
    let (_, arrhenius) = read_csv(&out.join("arrhenius.csv"));
    assert_eq!(arrhenius.len(), 3);
    let (_, series) = read_csv(&out.join("series.csv"));
    assert_eq!(series.len(), 200);
    assert!(read_json(&out.join("langevin_report.json"))["ks_distance"].is_number());
}

#[test]
fn belief_without_poisoning_matches_clean_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "b.json", r#"{"n_clean": 40, "n_poisoned": 0}"#);
    let out = dir.path().join("b");
    let o = cotdyn(&["belief", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("belief_report.json"));
    assert_eq!(report["ks_vs_clean"]["d"].as_f64(), Some(0.0));
    let (header, rows) = read_csv(&out.join("beliefs.csv"));
    assert_eq!(header, ["traj_id", "step", "belief", "regime"]);
    assert!(!rows.is_empty());
    assert!(out.join("scenario.json").exists());
}
