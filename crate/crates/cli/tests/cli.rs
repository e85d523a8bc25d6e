use std::path::Path;
use std::process::{Command, Output};

fn ella(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ella"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("ELLA_WORKERS")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(line: &str) -> serde_json::Value {
    serde_json::from_str(line.trim()).unwrap()
}

fn train_sine(dir: &Path, seed: &str, out: &str) -> serde_json::Value {
    json(&ok(&ella(dir, &["train", "--demo-sine", "--iters", "200", "--seed", seed, "-o", out])))
}

#[test]
fn training_is_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_sine(dir.path(), "0", "a.ckpt");
    let b = train_sine(dir.path(), "0", "b.ckpt");
    let c = train_sine(dir.path(), "1", "c.ckpt");
    assert_eq!(a["sha256"], b["sha256"]);
    assert_ne!(a["sha256"], c["sha256"]);
    assert!(a["train_nll"].as_f64().unwrap().is_finite());
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ella(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
}

#[test]
fn rank_above_landmarks_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    train_sine(dir.path(), "0", "m.ckpt");
    let out = ella(dir.path(), &["fit", "--checkpoint", "m.ckpt", "--M", "4", "--K", "5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_and_eval_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train_sine(d, "0", "m.ckpt");
    let fit = ["fit", "--checkpoint", "m.ckpt", "--M", "16", "--K", "5", "--seed", "3"];
    let first = json(&ok(&ella(d, &fit)));
    let second = json(&ok(&ella(d, &fit)));
    assert_eq!(first["posterior_sha256"], second["posterior_sha256"]);
    assert_eq!(first["k_used"], 5);
    assert_eq!(first["prior_var"], 1.0);
    let eval = ["eval", "--checkpoint", "m.ckpt", "--sketch", "ella.sketch", "--posterior", "ella.post"];
    let e1 = ok(&ella(d, &eval));
    assert_eq!(e1, ok(&ella(d, &eval)));
    let report = json(&e1);
    assert_eq!(report["report"]["n"], 16);
}

#[test]
fn eval_matches_library_on_classification() {
    use ella_core::autodiff::load_checkpoint;
    use ella_core::metrics::MetricsReport;
    use ella_core::nystrom::NystromSketch;
    use ella_core::posterior::EllaPosterior;
    use std::sync::Arc;

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = ["--demo-moons", "--n", "120", "--n-train", "80", "--n-val", "20"];
    let mut train = vec!["train", "--iters", "100", "--hidden", "8,8", "-o", "m.ckpt"];
    train.extend(data);
    ok(&ella(d, &train));
    ok(&ella(d, &["fit", "--checkpoint", "m.ckpt", "--M", "40", "--K", "6", "--early-stop", "--eval-every", "20"]));
    let out = ok(&ella(d, &["eval", "--checkpoint", "m.ckpt", "--sketch", "ella.sketch", "--posterior", "ella.post", "--mc-samples", "64", "--seed", "5", "--map"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    let cli = json(lines[0]);

    let (params, _) = load_checkpoint(d.join("m.ckpt")).unwrap();
    let sketch = Arc::new(NystromSketch::load(d.join("ella.sketch")).unwrap());
    let (post, header) = EllaPosterior::load(d.join("ella.post"), sketch).unwrap();
    assert_eq!(header.fit_log.len(), 5);
    let test = ella_core::data::split_sizes(&ella_core::data::gen_two_moons(120, 0.2, 0), &[80, 20], 0).unwrap().pop().unwrap();
    let probs = post.predictive_probs_batch(&params, &test.inputs, 64, 5).unwrap();
    let lib = MetricsReport::classification(&probs, test.labels().unwrap(), 15).unwrap();
    assert_eq!(cli["report"]["nll"].as_f64().unwrap(), lib.nll);
    assert_eq!(cli["report"]["ece"].as_f64().unwrap(), lib.ece);
    assert_eq!(json(lines[1])["method"], "map");
}

#[test]
fn tampered_sketch_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train_sine(d, "0", "m.ckpt");
    ok(&ella(d, &["fit", "--checkpoint", "m.ckpt", "--M", "16", "--K", "5"]));
    ok(&ella(d, &["fit", "--checkpoint", "m.ckpt", "--M", "16", "--K", "4", "--sketch-out", "other.sketch", "--posterior-out", "other.post"]));
    let out = ella(d, &["eval", "--checkpoint", "m.ckpt", "--sketch", "other.sketch", "--posterior", "ella.post"]);
    assert!(!out.status.success());
}

#[test]
fn verify_emits_one_report_per_instance() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&ella(dir.path(), &["verify", "--instances", "5", "--seed", "7"]));
    assert_eq!(out.lines().count(), 5);
    for line in out.lines() {
        assert_eq!(json(line)["holds_thm0"], true);
    }
    assert_eq!(out, ok(&ella(dir.path(), &["verify", "--instances", "5", "--seed", "7"])));
    assert!(ok(&ella(dir.path(), &["verify", "--instances", "0"])).is_empty());
}

#[test]
fn sweep_grid_has_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "sweep", "--M-grid", "8,16", "--K-grid", "2,4", "--seeds", "0", "--n-train", "40", "--n-val", "10", "--n-test",
        "10", "--hidden", "6", "--iters", "20", "--mc-samples", "16",
    ];
    let out = ok(&ella(dir.path(), &args));
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), "m,k,k_used,seed,eps_nystrom,eps_ella,test_nll");
    assert_eq!(lines.count(), 4);
}

#[test]
fn demo_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&ella(dir.path(), &["demo-regression", "--iters", "200", "--grid-points", "11", "--summary", "s.json"]));
    assert_eq!(out.lines().next().unwrap(), "x,mean,ella_std,lla_std,diag_std,lastlayer_std");
    assert_eq!(out.lines().count(), 12);
    let summary = json(&std::fs::read_to_string(dir.path().join("s.json")).unwrap());
    assert!(summary["kl_ella"].as_f64().unwrap() >= 0.0);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), "[verify]\ninstances = 3\nseed = 2\n").unwrap();
    let from_file = ok(&ella(d, &["--config", "run.toml", "verify"]));
    assert_eq!(from_file.lines().count(), 3);
    assert_eq!(json(from_file.lines().next().unwrap())["seed"], 2);
    let flagged = ok(&ella(d, &["verify", "--config", "run.toml", "--instances", "1"]));
    assert_eq!(flagged.lines().count(), 1);
}

#[test]
fn bad_worker_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ella"))
        .args(["verify", "--instances", "1"])
        .current_dir(dir.path())
        .env("ELLA_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let run = |workers: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_ella"))
            .args(["verify", "--instances", "4"])
            .current_dir(dir.path())
            .env("RUST_LOG", "warn")
            .env("ELLA_WORKERS", workers)
            .output()
            .unwrap();
        ok(&out)
    };
    assert_eq!(run("1"), run("3"));
}
