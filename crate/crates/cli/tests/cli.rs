//! End-to-end tests of the `fplab` binary: subcommand wiring, config
//! precedence, artifact layout, and the exit-code contract (0 ok,
//! 1 validation, 2 divergence, 3 I/O).

use std::path::Path;
use std::process::{Command, Output};

fn fplab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fplab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

/// Small-but-complete run: all components on, a couple of epochs.
const TINY: &[&str] = &[
    "--num_classes",
    "3",
    "--samples_per_class",
    "20",
    "--test_per_class",
    "10",
    "--input_dim",
    "5",
    "--sigma_gap",
    "2.5",
    "--hidden",
    "16",
    "--batch_size",
    "16",
    "--epochs",
    "3",
    "--swa_start",
    "1",
];

fn train_tiny(dir: &Path, run_id: &str, seed: &str, extra: &[&str]) -> Output {
    let out_dir = dir.to_string_lossy().to_string();
    let mut args = vec!["train", "--seed", seed, "--out_dir", &out_dir, "--run_id", run_id];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    fplab(&args)
}

#[test]
fn train_writes_the_full_artifact_set() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), "smoke", "7", &[]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("run smoke: selected epoch"), "{text}");
    assert!(text.contains("aurc_x1000"), "{text}");

    let run = dir.path().join("smoke");
    for f in [
        "model.ckpt",
        "final.ckpt",
        "config.txt",
        "manifest.json",
        "metrics.csv",
        "predictions.csv",
        "curve.csv",
        "confidence_histogram.csv",
        "curve.svg",
    ] {
        assert!(run.join(f).is_file(), "missing artifact {f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("run_id,accuracy,aurc_x1000,auroc,fpr95\n"), "{metrics}");
}

#[test]
fn train_requires_a_seed() {
    let out = fplab(&["train", "--epochs", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--seed"), "{}", stderr(&out));
}

#[test]
fn invalid_config_values_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), "bad", "1", &["--epochs", "0"]);
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(&out));
    let out = train_tiny(dir.path(), "bad2", "1", &["--head", "bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("head"), "{}", stderr(&out));
}

#[test]
fn divergence_exits_2_and_leaves_a_diagnostic_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(
        dir.path(),
        "boom",
        "1",
        &[
            "--lr",
            "1e155",
            "--lambda_mix",
            "0",
            "--lambda_crl",
            "0",
            "--rho",
            "0",
            "--swa",
            "false",
            "--head",
            "linear",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    let manifest = dir.path().join("boom").join("manifest.json");
    assert!(manifest.is_file(), "diagnostic manifest missing");
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(v["status"], "failed");
    assert_eq!(v["exit_code"], 2);
    assert_eq!(v["config"]["epochs"], "3");
}

#[test]
fn same_seed_runs_are_byte_identical() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    assert_eq!(train_tiny(dir_a.path(), "r", "11", &[]).status.code(), Some(0));
    assert_eq!(train_tiny(dir_b.path(), "r", "11", &[]).status.code(), Some(0));
    for f in ["metrics.csv", "predictions.csv", "model.ckpt"] {
        let a = std::fs::read(dir_a.path().join("r").join(f)).unwrap();
        let b = std::fs::read(dir_b.path().join("r").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("lab.cfg");
    std::fs::write(
        &cfg_path,
        "num_classes = 3\nsamples_per_class = 20\ntest_per_class = 10\n\
         input_dim = 5\nsigma_gap = 2.5\nhidden = 16\nbatch_size = 16\n\
         epochs = 4\nswa_start = 1\n",
    )
    .unwrap();
    let out_dir = dir.path().to_string_lossy().to_string();
    let cfg_arg = cfg_path.to_string_lossy().to_string();
    let out = fplab(&[
        "train", "--seed", "3", "--config", &cfg_arg, "--epochs", "2", "--out_dir", &out_dir,
        "--run_id", "prec",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("prec").join("manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["config"]["epochs"], "2"); // flag beats file
    assert_eq!(manifest["config"]["sigma_gap"], "2.5"); // file beats preset
}

#[test]
fn eval_scores_a_saved_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train_tiny(dir.path(), "base", "5", &[]).status.code(), Some(0));
    let ckpt = dir.path().join("base").join("model.ckpt");
    let csv = dir.path().join("eval.csv");
    let mut args = vec![
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--seed",
        "5",
        "--out",
        csv.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    let out = fplab(&args);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("test"), "{}", stdout(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("run_id,accuracy,aurc_x1000,auroc,fpr95\n"));
    assert!(text.contains("model/test,"), "{text}");

    // eval needs a model or a dump
    let out = fplab(&["eval"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn metrics_and_eval_score_prediction_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("dump.csv");
    std::fs::write(&dump, "0.9,1,1\n0.8,0,1\n0.7,2,2\n0.6,0,0\n").unwrap();
    let csv = dir.path().join("m.csv");
    let out = fplab(&[
        "metrics",
        "--dump",
        dump.to_str().unwrap(),
        "--run_id",
        "abc",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("abc"), "{}", stdout(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("run_id,accuracy,aurc_x1000,auroc,fpr95\nabc,0.75,"), "{text}");

    let out = fplab(&["eval", "--dump", dump.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));

    // missing dump file is an I/O failure
    let missing = dir.path().join("nope.csv");
    let out = fplab(&["metrics", "--dump", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
}

#[test]
fn ablate_prints_and_writes_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("grid.csv");
    let mut args = vec![
        "ablate",
        "--seeds",
        "1,2",
        "--cells",
        "baseline,full,sam",
        "--out",
        csv.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    let out = fplab(&args);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("baseline"), "{text}");
    assert!(text.contains("mixup+crl+sam+swa+csc"), "{text}");
    let table = std::fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("label,mixup,crl,sam,swa,csc,"));
    assert_eq!(table.lines().count(), 4); // header + three cells

    let out = fplab(&["ablate", "--cells", "nonsense"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn report_re_emits_artifacts_from_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train_tiny(dir.path(), "src", "9", &[]).status.code(), Some(0));
    let run = dir.path().join("src");
    let dest = dir.path().join("copy");
    std::fs::create_dir_all(&dest).unwrap();
    let out = fplab(&[
        "report",
        "--run_dir",
        run.to_str().unwrap(),
        "--out",
        dest.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    for f in ["manifest.json", "metrics.csv", "predictions.csv", "curve.csv"] {
        assert!(dest.join(f).is_file(), "missing re-emitted {f}");
    }
    let a = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let b = std::fs::read_to_string(dest.join("metrics.csv")).unwrap();
    assert_eq!(a, b);

    // pointing at an empty directory is an I/O failure
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = fplab(&["report", "--run_dir", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
}

#[test]
fn help_and_version_exit_0() {
    assert_eq!(fplab(&["--help"]).status.code(), Some(0));
    assert_eq!(fplab(&["--version"]).status.code(), Some(0));
    assert_eq!(fplab(&["train", "--help"]).status.code(), Some(0));
    // unknown subcommand is bad usage
    assert_eq!(fplab(&["frobnicate"]).status.code(), Some(1));
}
