use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn vapf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vapf")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = vapf(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_smoke<'a>(cmd: &'a str, out: &'a str, rest: &[&'a str]) -> Vec<&'a str> {
    let cfg = Box::leak(smoke_config().to_string_lossy().into_owned().into_boxed_str());
    let mut v = vec![cmd, "--config", cfg, "--out", out];
    v.extend_from_slice(rest);
    v
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();
    run_ok(&["gen-data", "--config", cfg, "--out", a.to_str().unwrap()]);
    run_ok(&["gen-data", "--config", cfg, "--out", b.to_str().unwrap()]);
    let ma = std::fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("manifest.json")).unwrap());
    // rerun over the same directory rewrites identical bytes
    run_ok(&["gen-data", "--config", cfg, "--out", a.to_str().unwrap()]);
    assert_eq!(ma, std::fs::read(a.join("manifest.json")).unwrap());
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"visual": {"patchsize": 4}}}"#).unwrap();
    let out = vapf(&["gen-data", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("patchsize"));

    std::fs::write(&bad, "{\"seeds\": [0,").unwrap();
    let out = vapf(&["gen-data", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = vapf(&with_smoke("sweep", dir.path().to_str().unwrap(), &["--prompt-axis", "depth"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, "x").unwrap();
    let out = vapf(&["gen-data", "--out", file.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let out = vapf(&["evaluate", "--checkpoint", dir.path().join("none.vapf").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn non_finite_loss_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(smoke_config()).unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(&text).unwrap();
    cfg["train"]["lr"] = serde_json::json!(1e12);
    let path = dir.path().join("hot.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = vapf(&["pretrain", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn prompt_tuning_run_keeps_frozen_tensors_and_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&with_smoke("finetune", out, &["--strategy", "pt", "--seed", "0"]));
    run_ok(&with_smoke("verify-freeze", out, &["--strategy", "pt", "--seed", "0"]));

    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("run_id,strategy,seed,bacc,f1,auc,trainable_params,total_params")
    );
    let pt: Vec<&str> = csv.lines().find(|l| l.starts_with("pt-s0,")).unwrap().split(',').collect();
    let (trainable, total): (usize, usize) = (pt[6].parse().unwrap(), pt[7].parse().unwrap());
    assert!(trainable > 0 && trainable * 50 < total, "{trainable}/{total}");

    let eval = run_ok(&[
        "evaluate",
        "--config",
        smoke_config().to_str().unwrap(),
        "--checkpoint",
        dir.path().join("checkpoints/pt-s0.vapf").to_str().unwrap(),
    ]);
    assert!(eval.contains(&format!("auc={}", pt[5])), "{eval} vs {pt:?}");
}

#[test]
fn vistab_checkpoint_has_no_global_transform() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&with_smoke("finetune", out, &["--strategy", "vistab", "--seed", "1"]));
    run_ok(&with_smoke("finetune", out, &["--strategy", "pt", "--seed", "1"]));
    let vistab = vapf::checkpoint::Checkpoint::load(&dir.path().join("checkpoints/vistab-s1.vapf")).unwrap();
    let pt = vapf::checkpoint::Checkpoint::load(&dir.path().join("checkpoints/pt-s1.vapf")).unwrap();
    assert!(vistab.tensors.keys().any(|n| n.contains(".prompt.")));
    assert!(!vistab.tensors.keys().any(|n| n.contains(".global.")));
    assert!(pt.tensors.keys().any(|n| n.contains(".global.")));
}

#[test]
fn commands_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(&with_smoke("pretrain", out.to_str().unwrap(), &["--seed", "2"]));
        run_ok(&with_smoke("finetune", out.to_str().unwrap(), &["--strategy", "ft", "--seed", "2"]));
    }
    let first = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(first, std::fs::read(b.join("metrics.csv")).unwrap());
    let ckpt = std::fs::read(a.join("checkpoints/ft-s2.vapf")).unwrap();
    run_ok(&with_smoke("finetune", a.to_str().unwrap(), &["--strategy", "ft", "--seed", "2"]));
    assert_eq!(first, std::fs::read(a.join("metrics.csv")).unwrap());
    assert_eq!(ckpt, std::fs::read(a.join("checkpoints/ft-s2.vapf")).unwrap());
}

#[test]
fn sweep_writes_table_and_bands() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&with_smoke(
        "sweep",
        out,
        &["--prompt-axis", "tabular", "--counts", "2,5", "--seeds", "0,1"],
    ));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("variant,axis,count,seed,auc"));
    // 2 variants x 2 counts x 2 seeds
    assert_eq!(csv.lines().count(), 1 + 8);
    let svg = std::fs::read_to_string(dir.path().join("sweep.svg")).unwrap();
    assert_eq!(svg.matches("class=\"band\"").count(), 2);

    // cached pretrained checkpoints make the rerun byte-identical
    run_ok(&with_smoke(
        "sweep",
        out,
        &["--prompt-axis", "tabular", "--counts", "2,5", "--seeds", "0,1"],
    ));
    assert_eq!(csv, std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap());
    assert_eq!(svg, std::fs::read_to_string(dir.path().join("sweep.svg")).unwrap());
}

#[test]
fn verify_passes_and_detects_corruption() {
    let stdout = run_ok(&["verify", "--gradcheck", "--oracles"]);
    assert!(stdout.contains("PASS gradcheck"));
    assert!(!stdout.contains("FAIL"));

    let out = vapf(&["verify", "--freeze", "--corrupt-frozen"]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL freeze"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("freeze"));

    // an impossible tolerance fails the gradient check
    let out = vapf(&["verify", "--gradcheck", "--tolerance", "1e-300"]);
    assert_eq!(out.status.code(), Some(5));
}
