use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tsa_cli::manifest::RunManifest;
use tsa_core::data::{Dataset, DomainTag};

fn tsa(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsa"))
        .args(args)
        .current_dir(cwd)
        .env("TSA_DETERMINISTIC", "1")
        .output()
        .unwrap()
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = tsa(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_data(cwd: &Path) {
    ok(
        cwd,
        &[
            "gen-data",
            "--identities",
            "4",
            "--imgs-per-id",
            "16",
            "--unlabeled-identities",
            "4",
            "--unlabeled-size",
            "100",
            "--eval-identities",
            "4",
            "--probes-per-id",
            "2",
        ],
    );
}

const TINY: &[&str] = &["--set", "epochs=1", "--set", "batch_size=16", "--set", "model.channels=8,8,8"];

#[test]
fn repeated_training_gives_identical_metrics_hashes() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    fs::write(dir.path().join("c.cfg"), "epochs = 2\nbatch_size = 16\nmodel.channels = 8,8,8\n").unwrap();
    for out in ["a", "b"] {
        ok(dir.path(), &["train", "--config", "c.cfg", "--seed", "7", "--out", out]);
    }
    let a = RunManifest::load(&dir.path().join("a")).unwrap();
    let b = RunManifest::load(&dir.path().join("b")).unwrap();
    assert_eq!(a.artifacts["metrics.jsonl"], b.artifacts["metrics.jsonl"]);
    assert_eq!(a.artifacts["epoch_002.ckpt"], b.artifacts["epoch_002.ckpt"]);
    assert!(a.config.contains("seed = 7\n"));
    assert_eq!(a.datasets["labeled"].hash, b.datasets["labeled"].hash);

    fs::write(dir.path().join("a/metrics.jsonl"), "{}\n").unwrap();
    assert!(RunManifest::load(&dir.path().join("a")).is_err());
}

#[test]
fn default_run_directories_do_not_collide() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let mut args = vec!["train", "--set", "adversary.mode=off"];
    args.extend(TINY);
    ok(dir.path(), &args);
    ok(dir.path(), &args);
    assert_eq!(fs::read_dir(dir.path().join("runs")).unwrap().count(), 2);
}

#[test]
fn beta_grid_of_four_makes_four_runs_and_one_summary() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let mut args = vec!["ablate-beta", "--grid", "0,0.5,1,5", "--out", "ab"];
    args.extend(TINY);
    let stdout = ok(dir.path(), &args);
    let runs: Vec<_> = fs::read_dir(dir.path().join("ab"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_type().unwrap().is_dir())
        .collect();
    assert_eq!(runs.len(), 4);
    for beta in ["0", "0.5", "1", "5"] {
        let run = dir.path().join(format!("ab/beta_{beta}"));
        let m = RunManifest::load(&run).unwrap();
        assert!(m.config.contains(&format!("adversary.beta = {beta}\n")));
        assert!(m.artifacts.contains_key("eval.json"));
    }
    let csv = fs::read_to_string(dir.path().join("ab/summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let table: Vec<&str> = stdout.lines().rev().take(4).collect();
    for (row, beta) in table.iter().rev().zip(["0", "0.5", "1", "5"]) {
        assert_eq!(row.split_whitespace().next().unwrap(), format!("beta_{beta}"));
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ab/summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 4);
}

#[test]
fn mode_ablation_covers_three_modes() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let mut args = vec!["ablate-mode", "--out", "am"];
    args.extend(TINY);
    ok(dir.path(), &args);
    for mode in ["off", "non_targeted", "targeted"] {
        let m = RunManifest::load(&dir.path().join(format!("am/mode_{mode}"))).unwrap();
        assert!(m.config.contains(&format!("adversary.mode = {mode}\n")));
        assert_eq!(m.datasets.len(), 3);
        assert!(m.artifacts.contains_key("style_swap.json"));
    }
}

fn variance(img: &[u8]) -> f64 {
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
    img.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / img.len() as f64
}

#[test]
fn ur_audit_matches_direct_pixel_energy_classifier() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    ok(dir.path(), &["ur-audit", "--out", "audit.json"]);
    let audit: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("audit.json")).unwrap()).unwrap();

    let ds = Dataset::read(&dir.path().join("data/unlabeled.tsad")).unwrap();
    let planted: Vec<bool> = ds.records.iter().map(|r| r.tag == DomainTag::UcUnrecognizable).collect();
    let k = planted.iter().filter(|&&p| p).count();
    assert_eq!(k, 20);
    let mut order: Vec<(f64, usize)> = ds.records.iter().map(|r| variance(&r.image)).zip(0..).collect();
    order.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let hits = order[..k].iter().filter(|&&(_, i)| planted[i]).count();

    let pe = &audit["pixel_energy"];
    assert_eq!(audit["top_k"], k);
    assert_eq!(pe["hits"], hits);
    assert_eq!(pe["precision"].as_f64().unwrap(), hits as f64 / k as f64);
    assert_eq!(pe["recall"].as_f64().unwrap(), hits as f64 / k as f64);
    assert!(audit["model"].is_null());
    // The planted samples are heavily attenuated, so contrast alone finds most.
    assert!(hits as f64 / k as f64 >= 0.8);
}

#[test]
fn evaluation_commands_write_json_reports() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let mut args = vec!["train", "--out", "run"];
    args.extend(TINY);
    ok(dir.path(), &args);
    let table = ok(dir.path(), &["eval", "--checkpoint", "run/epoch_001.ckpt"]);
    assert_eq!(table.lines().next().unwrap().split_whitespace().collect::<Vec<_>>(), ["metric", "value"]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/eval.json")).unwrap()).unwrap();
    assert_eq!(report["probes"], 8);
    assert_eq!(report["identification"][0]["k"], 1);

    ok(dir.path(), &["style-swap-eval", "--checkpoint", "run/epoch_001.ckpt"]);
    assert!(dir.path().join("run/style_swap.json").exists());

    let audit = ok(dir.path(), &["ur-audit", "--checkpoint", "run/epoch_001.ckpt", "--top-k", "10"]);
    assert!(audit.contains("entropy"));

    ok(dir.path(), &["export-stats", "--checkpoint", "run/epoch_001.ckpt", "--out", "s.csv"]);
    let csv = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 64 + 100 + 12);
    assert!(csv.lines().nth(1).unwrap().starts_with("labeled/sc,"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| tsa(dir.path(), args).status.code().unwrap();
    let out = tsa(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["train", "--set", "adversary.beta=high"]), 1);
    assert_eq!(code(&["train", "--preset", "huge"]), 1);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["eval", "--checkpoint", "missing.ckpt"]), 2);
    assert_eq!(code(&["train", "--data", "nowhere"]), 2);
}
