mod common;

use std::process::Command;

use common::*;

fn mondeq() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mondeq"));
    c.env("RUST_LOG", "warn");
    c
}

fn run_ok(c: &mut Command) -> String {
    let out = c.output().unwrap();
    assert!(
        out.status.success(),
        "{:?} failed\nstdout: {}\nstderr: {}",
        c,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn train_eval_inspect_and_bench_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let config = dir.path().join("small.cfg");
    std::fs::write(&config, "# tiny run\ntrain_limit = 200\ntest_limit = 100\nepochs = 3\n").unwrap();
    let out = run_ok(
        mondeq()
            .args(["train", "--preset", "fc-mnist", "--epochs", "1", "--batch-size", "50"])
            .arg("--config")
            .arg(&config)
            .arg("--out-dir")
            .arg(&run)
            .env("MONDEQ_DATA_DIR", fixture_dir()),
    );
    assert!(out.contains("final test accuracy"), "{out}");
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4, "{metrics}");
    let saved_cfg = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(saved_cfg.contains("epochs=1") && saved_cfg.contains("train_limit=200"));

    let ckpt = run.join("model.ckpt");
    let out = run_ok(mondeq().arg("inspect").arg(&ckpt));
    assert!(out.contains("preset = fc-mnist") && out.contains("core.A"), "{out}");

    let out = run_ok(
        mondeq()
            .arg("eval")
            .arg(&ckpt)
            .arg("--data-dir")
            .arg(fixture_dir())
            .args(["--test-limit", "100"]),
    );
    assert!(out.contains("100 examples"), "{out}");

    let csv = dir.path().join("conv.csv");
    run_ok(
        mondeq()
            .arg("bench-solver")
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--data-dir")
            .arg(fixture_dir())
            .args(["--probe-size", "16", "--pr-alphas", "0.5,1", "--fb-alphas", "0.125", "--max-iter", "100"])
            .arg("-o")
            .arg(&csv),
    );
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("method,alpha,iter,residual"));
    assert!(text.contains("\npr,0.5,1,") && text.contains("\nfb,0.125,1,"));
}

#[test]
fn dry_run_prints_the_resolved_configuration() {
    let out = run_ok(
        mondeq()
            .args(["train", "--preset", "conv-cifar", "--dry-run", "--lr", "0.002", "--method", "fb"])
            .env_remove("MONDEQ_DATA_DIR"),
    );
    assert!(out.contains("preset=conv-cifar"));
    assert!(out.contains("lr=0.002"));
    assert!(out.contains("method=fb"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let out = mondeq()
        .args(["train", "--batch-size", "0", "--dry-run"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));

    let out = mondeq()
        .args(["train", "--epochs", "1"])
        .env_remove("MONDEQ_DATA_DIR")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("MONDEQ_DATA_DIR"));

    let out = mondeq().args(["inspect", "/nonexistent.ckpt"]).output().unwrap();
    assert!(!out.status.success());
}
