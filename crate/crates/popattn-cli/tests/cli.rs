//! End-to-end tests of the `popattn` binary: the full synthetic pipeline,
//! plus exit codes and diagnostics on every failure path the CLI promises.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_popattn"));
    // Tests must not inherit a thread cap from the invoking shell.
    cmd.env_remove("POPATTN_THREADS");
    cmd
}

/// Fresh per-test directory under the cargo-managed tmp root.
fn work_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).expect("clear stale test dir");
    }
    fs::create_dir_all(&dir).expect("create test dir");
    dir
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("spawn popattn")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(0),
        "{what} failed\nstderr: {}",
        stderr_of(out)
    );
}

fn assert_validation_error(out: &Output, what: &str) -> String {
    let err = stderr_of(out);
    assert_eq!(out.status.code(), Some(1), "{what}\nstderr: {err}");
    err
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = work_dir("full_pipeline");
    for stage in [
        vec!["prepare", "--synthetic"],
        vec!["lda"],
        vec!["env"],
        vec!["train"],
        vec!["eval"],
        vec!["ablate"],
        vec!["cluster"],
        vec!["textstats"],
        vec!["attn"],
        vec!["heatmap"],
    ] {
        let out = run_in(&dir, &stage);
        assert_ok(&out, &format!("popattn {}", stage.join(" ")));
    }

    for artifact in [
        "posts.jsonl",
        "features.bin",
        "spatial.bin",
        "examples.jsonl",
        "splits.jsonl",
        "vocab.json",
        "lda.bin",
        "topics.bin",
        "env_index.jsonl",
        "env_payload.bin",
        "model.ckpt",
        "metrics.csv",
        "train_summary.json",
        "eval.json",
        "ablation.csv",
        "clusters.csv",
        "text_stats.csv",
        "attention.jsonl",
        "heatmaps.jsonl",
    ] {
        assert!(dir.join(artifact).is_file(), "missing artifact {artifact}");
    }

    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(
        metrics.starts_with("epoch,lr,train_loss,val_precision,val_recall,val_f,val_accuracy"),
        "unexpected metrics header: {}",
        metrics.lines().next().unwrap_or("")
    );

    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap();
    assert!(eval.get("accuracy").and_then(|v| v.as_f64()).is_some());

    let ablation = fs::read_to_string(dir.join("ablation.csv")).unwrap();
    let mut lines = ablation.lines();
    assert_eq!(
        lines.next(),
        Some("variant,best_epoch,val_accuracy,test_precision,test_recall,test_f,test_accuracy")
    );
    let variants: Vec<&str> = lines
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        variants,
        ["early", "e-attn", "env", "env-i-attn", "e-attn-env", "dual"]
    );
}

#[test]
fn missing_posts_reports_path_and_fix() {
    let dir = work_dir("missing_posts");

    // Reading a real corpus needs a posts file; the error names the path.
    let out = run_in(&dir, &["prepare"]);
    let err = assert_validation_error(&out, "prepare without a posts file");
    assert!(err.contains("posts.jsonl"), "stderr: {err}");

    // Later stages point back at the command that writes their input.
    let out = run_in(&dir, &["lda"]);
    let err = assert_validation_error(&out, "lda without prepared artifacts");
    assert!(err.contains("examples.jsonl"), "stderr: {err}");
    assert!(err.contains("popattn prepare"), "stderr: {err}");
}

#[test]
fn eval_without_checkpoint_points_at_train() {
    let dir = work_dir("eval_before_train");
    assert_ok(&run_in(&dir, &["prepare", "--synthetic"]), "prepare");
    let out = run_in(&dir, &["eval"]);
    let err = assert_validation_error(&out, "eval before train should fail validation");
    assert!(err.contains("popattn train"), "stderr: {err}");
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let dir = work_dir("usage");
    let unknown = run_in(&dir, &["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(1), "unknown subcommand");

    let bad_flag = run_in(&dir, &["eval", "--bogus-flag"]);
    assert_eq!(bad_flag.status.code(), Some(1), "unknown flag");

    let help = bin().arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0), "--help");
    assert!(String::from_utf8_lossy(&help.stdout).contains("popattn"));

    let version = bin().arg("--version").output().unwrap();
    assert_eq!(version.status.code(), Some(0), "--version");
}

#[test]
fn unknown_config_key_is_named() {
    let dir = work_dir("unknown_config_key");
    let cfg = dir.join("run.json");
    fs::write(&cfg, r#"{"train": {"seed": 3}}"#).unwrap();
    let out = bin()
        .args(["prepare", "--synthetic", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    let err = assert_validation_error(&out, "config with unknown key should be rejected");
    assert!(err.contains("seed"), "stderr should name the key: {err}");
}

#[test]
fn no_environment_variant_runs_without_topic_chain() {
    let dir = work_dir("no_env_variant");
    assert_ok(&run_in(&dir, &["prepare", "--synthetic"]), "prepare");
    assert_ok(
        &run_in(&dir, &["train", "--variant", "e-attn"]),
        "train e-attn without lda/env",
    );
    assert_ok(&run_in(&dir, &["eval"]), "eval e-attn");
    assert_ok(&run_in(&dir, &["attn"]), "attn e-attn");
    assert!(dir.join("attention.jsonl").is_file());
}

#[test]
fn attention_rejects_variants_without_weights() {
    let dir = work_dir("attn_visual");
    assert_ok(&run_in(&dir, &["prepare", "--synthetic"]), "prepare");
    assert_ok(
        &run_in(&dir, &["train", "--variant", "visual"]),
        "train visual baseline",
    );
    let out = run_in(&dir, &["attn"]);
    let err = assert_validation_error(&out, "attn on the visual baseline");
    assert!(err.contains("attention"), "stderr: {err}");
}

#[test]
fn thread_cap_env_var_is_validated() {
    let dir = work_dir("thread_cap");
    assert_ok(&run_in(&dir, &["prepare", "--synthetic"]), "prepare");

    let bad = bin()
        .env("POPATTN_THREADS", "zero")
        .args(["textstats", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    let err = assert_validation_error(&bad, "POPATTN_THREADS=zero");
    assert!(err.contains("POPATTN_THREADS"), "stderr: {err}");

    let good = bin()
        .env("POPATTN_THREADS", "2")
        .args(["textstats", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert_ok(&good, "textstats under POPATTN_THREADS=2");
}

#[test]
fn lda_topics_flag_overrides_config() {
    let dir = work_dir("topics_override");
    assert_ok(&run_in(&dir, &["prepare", "--synthetic"]), "prepare");
    assert_ok(&run_in(&dir, &["lda", "--topics", "4"]), "lda --topics 4");
    assert_ok(&run_in(&dir, &["env"]), "env");

    let index = fs::read_to_string(dir.join("env_index.jsonl")).unwrap();
    let header: serde_json::Value =
        serde_json::from_str(index.lines().next().expect("header line")).unwrap();
    assert_eq!(header["topic_dim"], 4, "header: {header}");
}

#[test]
fn cluster_threshold_must_stay_below_half() {
    let dir = work_dir("bad_threshold");
    let out = run_in(&dir, &["cluster", "--threshold", "0.6"]);
    let err = assert_validation_error(&out, "cluster --threshold 0.6");
    assert!(err.contains("threshold"), "stderr: {err}");
}

#[test]
fn seed_flag_controls_the_generated_corpus() {
    let a = work_dir("seed_a");
    let b = work_dir("seed_b");
    let c = work_dir("seed_c");
    assert_ok(&run_in(&a, &["prepare", "--synthetic", "--seed", "7"]), "seed 7");
    assert_ok(&run_in(&b, &["prepare", "--synthetic", "--seed", "7"]), "seed 7 again");
    assert_ok(&run_in(&c, &["prepare", "--synthetic", "--seed", "8"]), "seed 8");

    let posts = |d: &Path| fs::read(d.join("posts.jsonl")).unwrap();
    assert_eq!(posts(&a), posts(&b), "same seed must reproduce posts.jsonl");
    assert_ne!(posts(&a), posts(&c), "different seed must change posts.jsonl");
}
