//! End-to-end tests of the `harmonizer` binary: every subcommand, the exit
//! code contract, and the reproducibility guarantees. A small dataset and a
//! 2-epoch checkpoint are built once and shared across tests.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::LazyLock;

const BIN: &str = env!("CARGO_BIN_EXE_harmonizer");

fn harmonizer(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("HZ_SEED")
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn csv_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
        .lines()
        .map(str::to_string)
        .collect()
}

/// Tiny 16x16 training config matching the shared fixture dataset.
fn tiny_config_json(raters: usize) -> String {
    format!(
        r#"{{
  "phase1_epochs": 2, "phase2_epochs": 2,
  "lr_phase1": 0.0003, "lr_phase2": 0.0001,
  "beta1": 0.9, "beta2": 0.999, "weight_decay": 0.00001,
  "batch_size": 3, "k_train": 2, "memory_size": 10, "phase2_draws": 2,
  "seed": 11, "harmonizer_enabled": true, "ged_enabled": true,
  "model": {{
    "input_h": 16, "input_w": 16,
    "backbone": {{ "in_channels": 1, "base_width": 4, "depth": 2, "latent_dim": 4, "num_raters": {raters} }},
    "num_tokens": 2, "token_dim": 8, "token_hidden": 8, "num_prompts": 2, "bank_size": 4
  }},
  "weights": {{ "lambda_kl": 0.002, "lambda_harm": 0.0003, "lambda_ged": 1.0, "dice_ce_mix": 0.5 }}
}}"#
    )
}

struct Fixture {
    _root: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
}

/// One dataset (6/2/4 cases, 3 raters, 16x16) and one both-phase training
/// run, shared by every read-only test.
static FIX: LazyLock<Fixture> = LazyLock::new(|| {
    let root = tempfile::tempdir().expect("tempdir");
    let data = root.path().join("data");
    let run = root.path().join("run");
    assert_ok(&harmonizer(&[
        "gen",
        "--train", "6", "--val", "2", "--test", "4",
        "--raters", "3", "--size", "16", "--seed", "5",
        "--out", data.to_str().unwrap(),
    ]));
    let config = root.path().join("config.json");
    fs::write(&config, tiny_config_json(3)).expect("write config");
    assert_ok(&harmonizer(&[
        "train",
        "--data", data.to_str().unwrap(),
        "--out", run.to_str().unwrap(),
        "--phase", "both",
        "--config", config.to_str().unwrap(),
    ]));
    Fixture { _root: root, data, run }
});

fn checkpoint() -> PathBuf {
    FIX.run.join("phase2.hzck")
}

#[test]
fn gen_honors_the_count_contract() {
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(FIX.data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["counts"]["train"], 6);
    assert_eq!(manifest["counts"]["val"], 2);
    assert_eq!(manifest["counts"]["test"], 4);
    assert_eq!(manifest["num_raters"], 3);
    let images = fs::read_dir(&FIX.data)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("img_")
        })
        .count();
    assert_eq!(images, 12);
}

#[test]
fn gen_reruns_are_byte_identical_apart_from_the_run_manifest() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    for out in [&a, &b] {
        assert_ok(&harmonizer(&[
            "gen",
            "--train", "3", "--val", "1", "--test", "2",
            "--raters", "2", "--size", "16", "--seed", "9",
            "--out", out.to_str().unwrap(),
        ]));
    }
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert!(names.len() > 1);
    for name in names {
        if name == "run_manifest.json" {
            // The run manifest records wall-clock time and is excluded from
            // the reproducibility contract.
            continue;
        }
        let left = fs::read(a.join(&name)).unwrap();
        let right = fs::read(b.join(&name)).unwrap();
        assert_eq!(left, right, "{name} differs between identical runs");
    }
}

#[test]
fn gen_refuses_an_existing_directory_without_force() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("data");
    let args = [
        "gen",
        "--train", "2", "--val", "1", "--test", "1",
        "--raters", "2", "--size", "16", "--seed", "3",
        "--out", out.to_str().unwrap(),
    ];
    assert_ok(&harmonizer(&args));
    let again = harmonizer(&args);
    assert_eq!(exit_code(&again), 3);
    let mut forced: Vec<&str> = args.to_vec();
    forced.push("--force");
    assert_ok(&harmonizer(&forced));
}

#[test]
fn gen_supports_a_single_rater() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("solo");
    assert_ok(&harmonizer(&[
        "gen",
        "--train", "2", "--val", "1", "--test", "1",
        "--raters", "1", "--size", "16", "--seed", "3",
        "--out", out.to_str().unwrap(),
    ]));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["num_raters"], 1);
}

#[test]
fn train_writes_checkpoints_and_loss_logs() {
    assert!(FIX.run.join("phase1.hzck").is_file());
    assert!(FIX.run.join("phase2.hzck").is_file());
    let p1 = csv_lines(&FIX.run.join("phase1_loss.csv"));
    assert_eq!(p1[0], "epoch,seg,kl,harm,ged,total");
    assert_eq!(p1.len(), 3, "header + one row per epoch");
    let p2 = csv_lines(&FIX.run.join("phase2_loss.csv"));
    assert_eq!(p2[0], "epoch,mean_loss,loss_r0,loss_r1,loss_r2,dice_r0,dice_r1,dice_r2");
    assert_eq!(p2.len(), 3);
}

#[test]
fn no_ged_training_drops_the_ged_column() {
    let root = tempfile::tempdir().unwrap();
    let run = root.path().join("run");
    let config = root.path().join("config.json");
    fs::write(&config, tiny_config_json(3)).unwrap();
    assert_ok(&harmonizer(&[
        "train",
        "--data", FIX.data.to_str().unwrap(),
        "--out", run.to_str().unwrap(),
        "--phase", "1",
        "--config", config.to_str().unwrap(),
        "--epochs1", "1",
        "--no-ged",
    ]));
    let p1 = csv_lines(&run.join("phase1_loss.csv"));
    assert_eq!(p1[0], "epoch,seg,kl,harm,total");
}

#[test]
fn phase_two_without_a_phase_one_checkpoint_is_a_data_error() {
    let root = tempfile::tempdir().unwrap();
    let out = harmonizer(&[
        "train",
        "--data", FIX.data.to_str().unwrap(),
        "--out", root.path().join("run").to_str().unwrap(),
        "--phase", "2",
    ]);
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn eval_emits_per_case_rows_and_the_sweep_curve() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("eval");
    assert_ok(&harmonizer(&[
        "eval",
        "--checkpoint", checkpoint().to_str().unwrap(),
        "--data", FIX.data.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
        "--k", "4",
        "--sweep-k", "1,2,4",
    ]));
    let cases = csv_lines(&out.join("cases.csv"));
    assert_eq!(cases.len(), 1 + 4, "header + one row per test case");
    assert!(cases[0].contains("dice_r0,dice_r1,dice_r2"), "per-rater columns match rater count");
    let curve = csv_lines(&out.join("curve.csv"));
    assert_eq!(curve.len(), 1 + 3, "header + one row per swept k");
    assert!(curve[1].starts_with("1,"));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["mean_ged"].is_number());
}

#[test]
fn eval_with_a_missing_checkpoint_is_a_data_error() {
    let root = tempfile::tempdir().unwrap();
    let out = harmonizer(&[
        "eval",
        "--checkpoint", root.path().join("nope.hzck").to_str().unwrap(),
        "--data", FIX.data.to_str().unwrap(),
        "--out", root.path().join("eval").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn unknown_flags_and_bad_values_are_usage_errors() {
    assert_eq!(exit_code(&harmonizer(&["eval", "--no-such-flag"])), 2);
    let root = tempfile::tempdir().unwrap();
    let bad_split = harmonizer(&[
        "eval",
        "--checkpoint", checkpoint().to_str().unwrap(),
        "--data", FIX.data.to_str().unwrap(),
        "--out", root.path().join("e").to_str().unwrap(),
        "--split", "holdout",
    ]);
    assert_eq!(exit_code(&bad_split), 2);
}

#[test]
fn a_malformed_hz_seed_is_a_usage_error() {
    let root = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args([
            "eval",
            "--checkpoint", checkpoint().to_str().unwrap(),
            "--data", FIX.data.to_str().unwrap(),
            "--out", root.path().join("e").to_str().unwrap(),
        ])
        .env("HZ_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn hz_seed_steers_the_evaluation() {
    let root = tempfile::tempdir().unwrap();
    let by_env = root.path().join("env");
    let by_flag = root.path().join("flag");
    let out = Command::new(BIN)
        .args([
            "eval",
            "--checkpoint", checkpoint().to_str().unwrap(),
            "--data", FIX.data.to_str().unwrap(),
            "--out", by_env.to_str().unwrap(),
            "--k", "2",
        ])
        .env("HZ_SEED", "123")
        .output()
        .unwrap();
    assert_ok(&out);
    assert_ok(&harmonizer(&[
        "eval",
        "--checkpoint", checkpoint().to_str().unwrap(),
        "--data", FIX.data.to_str().unwrap(),
        "--out", by_flag.to_str().unwrap(),
        "--k", "2",
        "--seed", "123",
    ]));
    assert_eq!(
        fs::read(by_env.join("cases.csv")).unwrap(),
        fs::read(by_flag.join("cases.csv")).unwrap(),
        "env seed and flag seed must agree"
    );
}

#[test]
fn perturb_eval_covers_the_full_grid() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("perturb");
    assert_ok(&harmonizer(&[
        "perturb-eval",
        "--checkpoint", checkpoint().to_str().unwrap(),
        "--data", FIX.data.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
        "--k", "2",
    ]));
    let rows = csv_lines(&out.join("robustness.csv"));
    assert_eq!(rows[0], "model,kind,magnitude,clean_dice,perturbed_dice,abs_delta");
    assert_eq!(rows.len(), 1 + 10, "identity + 3 noise + 3 blur + 3 gamma");
    let identity: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(identity[1], "identity");
    assert_eq!(identity[5], "0", "identity row has zero dice gap");
    let kinds: Vec<&str> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(kinds.iter().filter(|k| **k == "noise").count(), 3);
    assert_eq!(kinds.iter().filter(|k| **k == "blur").count(), 3);
    assert_eq!(kinds.iter().filter(|k| **k == "gamma").count(), 3);
}

#[test]
fn perturb_eval_compares_two_checkpoints() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("perturb");
    assert_ok(&harmonizer(&[
        "perturb-eval",
        "--checkpoint", checkpoint().to_str().unwrap(),
        "--checkpoint-b", FIX.run.join("phase1.hzck").to_str().unwrap(),
        "--data", FIX.data.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
        "--k", "2",
    ]));
    let rows = csv_lines(&out.join("robustness.csv"));
    assert_eq!(rows.len(), 1 + 20, "ten rows per model");
    assert!(rows[1].starts_with("phase2,"));
    assert!(rows[11].starts_with("phase1,"));
}

#[test]
fn analyze_emits_the_full_bundle() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("analyze");
    assert_ok(&harmonizer(&[
        "analyze",
        "--checkpoint", checkpoint().to_str().unwrap(),
        "--data", FIX.data.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
        "--k", "4",
        "--grid-samples", "2",
    ]));
    let ece = csv_lines(&out.join("ece_table.csv"));
    assert_eq!(ece.len(), 1 + 3 + 1, "header + one row per rater + mean row");
    assert!(ece.last().unwrap().starts_with("mean,"));
    assert_eq!(csv_lines(&out.join("entropy_correctness.csv")).len(), 1 + 4);
    assert_eq!(csv_lines(&out.join("entropy_agreement.csv")).len(), 1 + 3);
    assert_eq!(csv_lines(&out.join("size_bins.csv")).len(), 1 + 3);
    assert_eq!(
        csv_lines(&out.join("spectrum.csv")).len(),
        1 + 16 / 2 + 1,
        "header + H/2+1 frequency bins"
    );
    assert_eq!(csv_lines(&out.join("entropy_scatter.csv")).len(), 1 + 4);
    for svg in ["scatter.svg", "agreement.svg", "spectrum.svg"] {
        let body = fs::read_to_string(out.join(svg)).unwrap();
        assert!(body.starts_with("<svg") && body.trim_end().ends_with("</svg>"), "{svg} well-formed");
    }
    for png in ["grid_008.png", "grid_009.png"] {
        let bytes = fs::read(out.join(png)).unwrap();
        assert_eq!(&bytes[..8], &[0x89, 0x50, 0x4E, 0x47, 0x0D, 0x0A, 0x1A, 0x0A], "{png} magic");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("spectrum_summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["bins"], 9);
}

#[test]
fn every_command_writes_exactly_one_run_manifest() {
    let manifest_path = FIX.run.join("run_manifest.json");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert!(manifest["config"].is_object());
    assert!(manifest["seed"].is_u64());
    assert!(manifest["code_version"].is_string());
    assert!(manifest["wall_clock_unix"].is_number());
}
