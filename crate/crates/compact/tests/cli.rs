//! Drives the compiled binary end to end: artifact layout, exit codes,
//! determinism of emitted files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use compact::synth;
use compact::tensorstore::{load_container, save_container};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_compact"))
}

struct Fixture {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    model: PathBuf,
    tokenizer: PathBuf,
    config: PathBuf,
    corpus: PathBuf,
}

fn tc1_fixture(seed: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth::tc1_config();
    let weights = synth::model(&cfg, seed);
    let tok = synth::tc1_tokenizer();

    let model = dir.path().join("model.safetensors");
    let tokenizer = dir.path().join("tokenizer.json");
    let config = dir.path().join("config.json");
    let corpus = dir.path().join("corpus.txt");

    save_container(&weights, &model).unwrap();
    tok.save(&tokenizer).unwrap();
    cfg.save(&config).unwrap();
    fs::write(
        &corpus,
        synth::text_corpus(60, 6..14, seed).join(&b"\n"[..]),
    )
    .unwrap();

    Fixture {
        dir,
        model,
        tokenizer,
        config,
        corpus,
    }
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn analyze_prints_the_census() {
    let out = run_ok(
        bin()
            .args(["analyze", "--config"])
            .arg(fixture_path("qwen2.5-0.5b.json")),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("vocab"), "{stdout}");
    assert!(stdout.contains("0.2756"), "{stdout}");
    assert!(stdout.contains("0.6352"), "{stdout}");
    assert!(stdout.contains("494005120"), "{stdout}");
}

#[test]
fn sweep_lists_the_reference_rows() {
    let out = run_ok(
        bin()
            .args(["sweep", "--target-ratio", "0.37", "--config"])
            .arg(fixture_path("qwen2.5-0.5b.json")),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("151936"), "{stdout}");
    assert!(
        stdout
            .lines()
            .any(|l| l.contains("49536") && l.contains("3456")),
        "{stdout}"
    );
}

fn prune_into(fx: &Fixture, out_dir: &Path, extra: &[&str]) -> Output {
    let mut cmd = bin();
    cmd.arg("prune")
        .arg("--model")
        .arg(&fx.model)
        .arg("--tokenizer")
        .arg(&fx.tokenizer)
        .arg("--config")
        .arg(&fx.config)
        .arg("--calib")
        .arg(&fx.corpus)
        .arg("--out")
        .arg(out_dir)
        .args(["--samples", "6", "--seq-len", "16"])
        .args(extra);
    run_ok(&mut cmd)
}

#[test]
fn identity_prune_reproduces_the_model_and_verify_accepts_it() {
    let fx = tc1_fixture(1);
    let out_dir = fx.dir.path().join("out");
    prune_into(&fx, &out_dir, &["--vocab-size", "10", "--inter-size", "6"]);

    for artifact in [
        "model.safetensors",
        "tokenizer.json",
        "config.json",
        "report.json",
        "importance.json",
    ] {
        assert!(out_dir.join(artifact).exists(), "{artifact} missing");
    }

    let original = load_container(&fx.model).unwrap();
    let emitted = load_container(&out_dir.join("model.safetensors")).unwrap();
    assert_eq!(original, emitted);

    let verify = run_ok(bin().arg("verify").arg(&out_dir));
    assert!(String::from_utf8_lossy(&verify.stdout).starts_with("ok"));
}

#[test]
fn identical_run_configs_emit_byte_identical_artifacts() {
    let fx = tc1_fixture(2);
    let a = fx.dir.path().join("a");
    let b = fx.dir.path().join("b");
    let flags = ["--vocab-size", "7", "--inter-size", "3", "--seed", "9"];
    prune_into(&fx, &a, &flags);
    prune_into(&fx, &b, &flags);

    // report.json carries wall time; every model artifact must match exactly
    for artifact in [
        "model.safetensors",
        "tokenizer.json",
        "config.json",
        "importance.json",
    ] {
        let x = fs::read(a.join(artifact)).unwrap();
        let y = fs::read(b.join(artifact)).unwrap();
        assert_eq!(x, y, "{artifact} differs between identical runs");
    }
}

#[test]
fn threaded_scoring_is_reproducible_for_a_fixed_thread_count() {
    let fx = tc1_fixture(3);
    let a = fx.dir.path().join("a");
    let b = fx.dir.path().join("b");
    let flags = ["--vocab-size", "8", "--inter-size", "4", "--threads", "3"];
    prune_into(&fx, &a, &flags);
    prune_into(&fx, &b, &flags);
    assert_eq!(
        fs::read(a.join("importance.json")).unwrap(),
        fs::read(b.join("importance.json")).unwrap()
    );
}

#[test]
fn target_ratio_mode_plans_a_configuration() {
    let fx = tc1_fixture(4);
    let out_dir = fx.dir.path().join("out");
    let out = prune_into(
        &fx,
        &out_dir,
        &[
            "--target-ratio",
            "0.35",
            "--vocab-step",
            "1",
            "--inter-step",
            "1",
            "--tolerance",
            "0.02",
        ],
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("planned"), "{stderr}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    let achieved = report["achieved_ratio"].as_f64().unwrap();
    assert!((achieved - 0.35).abs() <= 0.02, "{achieved}");
    run_ok(bin().arg("verify").arg(&out_dir));
}

#[test]
fn planning_and_explicit_sizes_are_mutually_exclusive() {
    let fx = tc1_fixture(5);
    let out = bin()
        .arg("prune")
        .arg("--model")
        .arg(&fx.model)
        .arg("--tokenizer")
        .arg(&fx.tokenizer)
        .arg("--config")
        .arg(&fx.config)
        .arg("--calib")
        .arg(&fx.corpus)
        .arg("--out")
        .arg(fx.dir.path().join("out"))
        .args([
            "--vocab-size",
            "8",
            "--inter-size",
            "4",
            "--target-ratio",
            "0.3",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn verify_flags_a_corrupted_directory_with_exit_1() {
    let fx = tc1_fixture(6);
    let out_dir = fx.dir.path().join("out");
    prune_into(&fx, &out_dir, &["--vocab-size", "8", "--inter-size", "4"]);

    // shrink the config's intermediate size so shapes no longer match
    let cfg_path = out_dir.join("config.json");
    let text = fs::read_to_string(&cfg_path).unwrap();
    fs::write(
        &cfg_path,
        text.replace("\"intermediate_size\": 4", "\"intermediate_size\": 3"),
    )
    .unwrap();

    let out = bin().arg("verify").arg(&out_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("finding"));
}

#[test]
fn verify_reports_errors_with_exit_2() {
    let out = bin()
        .arg("verify")
        .arg("/nonexistent-dir")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn score_writes_an_importance_table() {
    let fx = tc1_fixture(7);
    let report = fx.dir.path().join("importance.json");
    run_ok(
        bin()
            .arg("score")
            .arg("--model")
            .arg(&fx.model)
            .arg("--tokenizer")
            .arg(&fx.tokenizer)
            .arg("--config")
            .arg(&fx.config)
            .arg("--calib")
            .arg(&fx.corpus)
            .arg("--report")
            .arg(&report)
            .args([
                "--samples",
                "5",
                "--seq-len",
                "16",
                "--vocab-size",
                "8",
                "--scorer",
                "common-act2",
            ]),
    );
    let table = compact::scoring::ImportanceTable::load(&report).unwrap();
    assert_eq!(table.layers.len(), 2);
    assert_eq!(table.layers[0].len(), 6);
}

#[test]
fn retok_stats_reports_churn() {
    let fx = tc1_fixture(8);
    let report = fx.dir.path().join("churn.json");
    let out = run_ok(
        bin()
            .arg("retok-stats")
            .arg("--tokenizer")
            .arg(&fx.tokenizer)
            .arg("--calib")
            .arg(&fx.corpus)
            .arg("--report")
            .arg(&report)
            .args(["--vocab-size", "7"]),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("corpus.txt"), "{stdout}");
    let churn: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(churn["sources"][0]["words"].as_u64().unwrap() > 0);
}

#[test]
fn thread_count_can_come_from_the_environment() {
    let fx = tc1_fixture(9);
    let out_dir = fx.dir.path().join("out");
    let mut cmd = bin();
    cmd.arg("prune")
        .arg("--model")
        .arg(&fx.model)
        .arg("--tokenizer")
        .arg(&fx.tokenizer)
        .arg("--config")
        .arg(&fx.config)
        .arg("--calib")
        .arg(&fx.corpus)
        .arg("--out")
        .arg(&out_dir)
        .args([
            "--samples",
            "6",
            "--seq-len",
            "16",
            "--vocab-size",
            "8",
            "--inter-size",
            "4",
        ])
        .env("COMPACT_THREADS", "2");
    run_ok(&mut cmd);
    run_ok(
        bin()
            .arg("verify")
            .arg(&out_dir)
            .env("COMPACT_THREADS", "junk"),
    );
}

#[test]
fn missing_inputs_exit_2_with_a_diagnostic() {
    let out = bin()
        .args(["analyze", "--config", "/no/such/config.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(
        stderr.lines().count(),
        1,
        "one-line diagnostic expected: {stderr}"
    );
}
