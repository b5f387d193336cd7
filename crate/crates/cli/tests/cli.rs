use std::path::Path;
use std::process::{Command, Output};

fn ecotrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecotrain")).args(args).output().unwrap()
}

const TINY: [&str; 14] = [
    "--set",
    "model.width=8",
    "--set",
    "model.num_blocks=2",
    "--set",
    "data.n_train=300",
    "--set",
    "data.n_test=100",
    "--set",
    "train.iterations=40",
    "--set",
    "train.eval_batch=100",
    "--set",
    "train.eval_samples=100",
];

fn train(scenario: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--scenario", scenario, "--out", out.to_str().unwrap()];
    args.extend(TINY);
    args.extend(extra);
    ecotrain(&args)
}

#[test]
fn train_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("smb");
    let smd = dir.path().join("smd");
    let o = train("smb", &base, &["--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = std::fs::read_to_string(base.join("effective_config.toml")).unwrap();
    assert!(echoed.contains("seed = 3"));
    assert!(echoed.contains("width = 8"));
    let o = train("smd", &smd, &["--baseline", base.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = dir.path().join("table.csv");
    let o = ecotrain(&[
        "compare",
        "--baseline",
        base.to_str().unwrap(),
        smd.to_str().unwrap(),
        "--out",
        table.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(table).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,Computational Savings (FLOPs),Energy Savings,accuracy"
    );
    assert!(lines.next().unwrap().starts_with("smd,"));
}

#[test]
fn compare_without_baseline_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = ecotrain(&[
        "compare",
        "--baseline",
        dir.path().join("none").to_str().unwrap(),
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("ledger.json"));
}

#[test]
fn config_file_and_flags_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 9\n[slu]\nalpha = 0.2\n").unwrap();
    let out = dir.path().join("run");
    let o = train("slu", &out, &["--config", cfg.to_str().unwrap(), "--set", "slu.alpha=0.4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = std::fs::read_to_string(out.join("effective_config.toml")).unwrap();
    assert!(echoed.contains("seed = 9"));
    assert!(echoed.contains("alpha = 0.4"));
}

#[test]
fn invalid_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bad");
    let o = train("smd", &out, &["--set", "smd.p=1.5"]);
    assert!(!o.status.success());
    assert!(!out.exists());
    let o = train("smd", &out, &["--set", "smd.nonsense=1"]);
    assert!(!o.status.success());
    let o = ecotrain(&["train", "--scenario", "fast"]);
    assert!(!o.status.success());
}

#[test]
fn seed_sweep_in_child_processes() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--scenario", "smb", "--out", dir.path().to_str().unwrap()];
    args.extend(TINY);
    args.extend(["--jobs", "2", "--seeds", "1,2"]);
    let o = ecotrain(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for s in ["seed1", "seed2"] {
        assert!(dir.path().join(s).join("summary.csv").exists());
    }
}

#[test]
fn verify_psg_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v.csv");
    let o = ecotrain(&[
        "verify-psg",
        "--x-bits",
        "4,8",
        "--n-samples",
        "10000",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(&rows[0][..6], ["bits", "tau", "rate", "rate_ci", "bound", "bound_ci"]);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][0], "4/10");
    assert_eq!(rows[2][0], "8/14");
    let o = ecotrain(&["verify-psg", "--n-samples", "100"]);
    assert!(!o.status.success());
}

#[test]
fn finetune_split_reports_both_options() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ft.json");
    let mut args = vec!["finetune-split", "--scenario", "e2train", "--finetune-iterations", "20"];
    args.extend(TINY);
    args.extend(["--out", out.to_str().unwrap()]);
    let o = ecotrain(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    for k in ["last_layer_delta", "all_layer_delta", "extra_energy_savings"] {
        assert!(v[k].is_number(), "{k}");
    }
}
