use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hvp::harness::io::git_blob_hash;
use hvp::harness::ExperimentConfig;

const SMALL: &str = "\
seed = 3
prior.kind = bimodal
prior.dim = 2
task.kind = identity
task.sigma_y = 0.2
schedule.steps = 4
policy.hidden = [8]
noise_policy.hidden = [8]
train.epochs_stage1 = 3
train.epochs_stage2 = 3
train.batch_size = 8
train.lr = 0.001
train.dataset_size = 16
train.heldout_size = 3
eval.rollouts = 2
";

fn hvp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hvp"))
        .args(args)
        .current_dir(dir)
        .env_remove("HVP_THREADS")
        .output()
        .expect("binary runs")
}

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, format!("{SMALL}{extra}")).unwrap();
    (dir, cfg)
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path, cmd: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join(format!("manifest_{cmd}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn methods(csv_path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(csv_path).unwrap();
    r.records().map(|rec| rec.unwrap()[0].to_string()).collect()
}

#[test]
fn train_eval_pipeline_and_manifests() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("o");
    ok(&hvp(dir.path(), &["train-stage1", "--config", s(&cfg), "--out", s(&out)]));
    let s1 = out.join("stage1.ckpt");
    ok(&hvp(dir.path(), &["train-stage2", "--config", s(&cfg), "--out", s(&out), "--checkpoint", s(&s1)]));
    let s2 = out.join("stage2.ckpt");
    let e = hvp(dir.path(), &["eval", "--config", s(&cfg), "--out", s(&out), "--checkpoint", s(&s2)]);
    ok(&e);

    let rows = methods(&out.join("metrics.csv"));
    for m in ["unguided", "stage1_only", "ahvp", "ahvp_det", "shvp"] {
        // three observations plus the aggregate row
        assert_eq!(rows.iter().filter(|r| *r == m).count(), 4, "{m}");
    }
    let stdout = String::from_utf8_lossy(&e.stdout);
    assert!(stdout.contains("shvp") && stdout.contains("denoiser 44"), "{stdout}");

    let m = manifest(&out, "eval");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["checkpoint"]["hash"], git_blob_hash(&std::fs::read(&s2).unwrap()));
    let config_text = m["config"].as_str().unwrap();
    assert_eq!(m["config_hash"], hvp::harness::io::sha256_hex(config_text.as_bytes()));
    let effective = ExperimentConfig::parse(config_text).unwrap();
    assert_eq!(effective.out, out);
    let metrics_key = out.join("metrics.csv").display().to_string();
    assert_eq!(
        m["outputs"][&metrics_key],
        git_blob_hash(&std::fs::read(out.join("metrics.csv")).unwrap())
    );
    assert!(out.join("loss_stage1.csv").exists() && out.join("loss_stage2.csv").exists());
    assert!(manifest(&out, "train-stage1")["checkpoint"].is_null());
}

#[test]
fn reruns_from_the_manifest_are_bit_exact() {
    let (dir, cfg) = setup("");
    let a = dir.path().join("a");
    ok(&hvp(dir.path(), &["train-stage1", "--config", s(&cfg), "--out", s(&a)]));
    ok(&hvp(dir.path(), &["eval", "--config", s(&cfg), "--out", s(&a), "--checkpoint", s(&a.join("stage1.ckpt"))]));

    // Replay from the recorded effective config alone.
    let recorded = manifest(&a, "train-stage1")["config"].as_str().unwrap().to_string();
    let replay = dir.path().join("replay.cfg");
    std::fs::write(&replay, recorded.replace(&format!("{:?}", s(&a)), "\"b\"")).unwrap();
    let b = dir.path().join("b");
    ok(&hvp(dir.path(), &["train-stage1", "--config", s(&replay)]));
    ok(&hvp(dir.path(), &["eval", "--config", s(&replay), "--checkpoint", s(&b.join("stage1.ckpt"))]));

    for f in ["stage1.ckpt", "loss_stage1.csv", "metrics.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_without_checkpoint_runs_unguided_only() {
    let (dir, cfg) = setup("");
    ok(&hvp(dir.path(), &["eval", "--config", s(&cfg), "--out", "e"]));
    let rows = methods(&dir.path().join("e/metrics.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r == "unguided"));
}

#[test]
fn seed_flag_overrides_config() {
    let (dir, cfg) = setup("");
    ok(&hvp(dir.path(), &["eval", "--config", s(&cfg), "--out", "x", "--seed", "11"]));
    assert_eq!(manifest(&dir.path().join("x"), "eval")["seed"], 11);
}

#[test]
fn sample_and_refine_write_indexed_sample_files() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("o");
    ok(&hvp(dir.path(), &["train-stage1", "--config", s(&cfg), "--out", s(&out)]));
    let ckpt = out.join("stage1.ckpt");
    ok(&hvp(dir.path(), &["sample", "--config", s(&cfg), "--out", s(&out), "--checkpoint", s(&ckpt)]));
    ok(&hvp(dir.path(), &["refine", "--config", s(&cfg), "--out", s(&out), "--checkpoint", s(&ckpt)]));
    for mode in ["ahvp", "shvp"] {
        let p = out.join(format!("samples_{mode}.hvpx"));
        let x = hvp::harness::read_samples(&p).unwrap();
        assert_eq!((x.rows(), x.cols()), (6, 2));
        let ix = hvp::harness::io::read_sample_index(&p).unwrap();
        assert_eq!(ix.len(), 6);
        assert_eq!(ix[0].obs_id, 16);
        assert_eq!(ix[5].obs_id, 18);
    }
}

#[test]
fn suites_report_pass() {
    let (dir, cfg) = setup("");
    let g = hvp(dir.path(), &["gradcheck", "--config", s(&cfg), "--out", "g"]);
    ok(&g);
    let text = String::from_utf8_lossy(&g.stdout);
    assert!(text.lines().count() >= 6 && !text.contains("FAIL"), "{text}");
    let o = hvp(dir.path(), &["oracle-check", "--config", s(&cfg), "--out", "g"]);
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.matches("PASS").count(), 3, "{text}");
}

#[test]
fn ablate_two_stage_rows() {
    let (dir, cfg) = setup("");
    ok(&hvp(dir.path(), &["ablate", "--which", "two-stage", "--config", s(&cfg), "--out", "a"]));
    let rows = methods(&dir.path().join("a/ablate_two-stage.csv"));
    assert_eq!(rows.iter().filter(|r| *r == "stage1_only").count(), 4);
    assert_eq!(rows.iter().filter(|r| *r == "ahvp").count(), 4);
    assert!(dir.path().join("a/stage2.ckpt").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let (dir, cfg) = setup("");
    assert_eq!(hvp(dir.path(), &["eval", "--config", "missing.cfg"]).status.code(), Some(2));
    assert_eq!(hvp(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(hvp(dir.path(), &["ablate", "--which", "nope"]).status.code(), Some(2));

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, format!("{SMALL}policy.colour = red\n")).unwrap();
    let out = hvp(dir.path(), &["eval", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("policy.colour"));

    let threads = Command::new(env!("CARGO_BIN_EXE_hvp"))
        .args(["eval", "--config", s(&cfg), "--out", "t"])
        .current_dir(dir.path())
        .env("HVP_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));

    // A checkpoint for a different schedule is a configuration mismatch.
    ok(&hvp(dir.path(), &["train-stage1", "--config", s(&cfg), "--out", "c"]));
    let other = dir.path().join("other.cfg");
    std::fs::write(&other, SMALL.replace("schedule.steps = 4", "schedule.steps = 5")).unwrap();
    let ckpt = dir.path().join("c/stage1.ckpt");
    assert_eq!(hvp(dir.path(), &["eval", "--config", s(&other), "--checkpoint", s(&ckpt)]).status.code(), Some(2));
}

#[test]
fn numeric_failures_exit_with_one() {
    let (dir, cfg) = setup("loss.w_T = 1e308\n");
    let out = hvp(dir.path(), &["train-stage1", "--config", s(&cfg), "--out", "n"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    // The last good parameters are still saved.
    assert!(dir.path().join("n/stage1.ckpt").exists());

    std::fs::write(dir.path().join("broken.ckpt"), b"HVP1\x02").unwrap();
    let clean = dir.path().join("clean.cfg");
    std::fs::write(&clean, SMALL).unwrap();
    let out = hvp(dir.path(), &["eval", "--config", s(&clean), "--checkpoint", "broken.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
}
