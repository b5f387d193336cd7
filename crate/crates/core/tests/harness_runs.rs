use std::sync::Arc;

use ecotrain::config::{RunConfig, Scenario};
use ecotrain::energy::CostModel;
use ecotrain::harness::{self, compare, finetune_split, load_data, run, train_with, RunSummary, COMPARE_HEADER};
use ecotrain::metrics::read_metrics;

fn tiny(scenario: Scenario) -> RunConfig {
    let mut c = RunConfig::for_scenario(scenario);
    c.model.width = 8;
    c.model.num_blocks = 2;
    c.data.n_train = 400;
    c.data.n_test = 200;
    c.train.iterations = 200;
    c.train.eval_every = 100;
    c.train.ledger_every = 25;
    c.train.eval_samples = 100;
    c.train.eval_batch = 100;
    c.train.bn_recalibration_samples = 200;
    c
}

#[test]
fn smb_run_writes_outputs_and_beats_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Scenario::Smb);
    let (out, rep) = run(&cfg, Some(dir.path()), None).unwrap();
    assert!(out.final_accuracy > 0.2, "{}", out.final_accuracy);
    assert_eq!(rep.computational_savings, 0.0);
    assert_eq!(rep.energy_savings, 0.0);
    for f in ["metrics.jsonl", "summary.csv", "effective_config.toml", "ledger.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let recs = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(recs.iter().filter(|r| r.train_loss.is_some()).count(), 200);
    assert_eq!(recs.iter().filter(|r| r.ledger.is_some()).count(), 200 / 25 + 1);
    assert!(recs.last().unwrap().eval_accuracy.is_some());
    let echoed = std::fs::read_to_string(dir.path().join("effective_config.toml")).unwrap();
    assert_eq!(RunConfig::from_toml(&echoed).unwrap(), cfg);
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = tiny(Scenario::E2train);
    cfg.train.iterations = 60;
    run(&cfg, Some(a.path()), None).unwrap();
    cfg.data.prefetch = !cfg.data.prefetch;
    run(&cfg, Some(b.path()), None).unwrap();
    let ma = std::fs::read(a.path().join("metrics.jsonl")).unwrap();
    let mb = std::fs::read(b.path().join("metrics.jsonl")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn smd_half_ratio_halves_batch_compute() {
    let base = tiny(Scenario::Smb);
    let mut smd = tiny(Scenario::Smd);
    smd.smd.energy_ratio = 0.5;
    let (train, test) = load_data(&base).unwrap();
    let train = Arc::new(train);
    let b = train_with(&base, train.clone(), &test, None, None).unwrap();
    let s = train_with(&smd, train, &test, None, None).unwrap();
    assert_eq!(s.scheduled_steps, 200);
    assert_eq!(b.ledger.flops() % b.processed_steps as u64, 0);
    let per_step = b.ledger.flops() / b.processed_steps as u64;
    assert_eq!(s.ledger.flops(), per_step * s.processed_steps as u64);
    assert_eq!(s.recalibration_ledger, b.recalibration_ledger);
    let ratio = s.processed_steps as f64 / b.processed_steps as f64;
    assert!((ratio - 0.5).abs() < 0.15, "{ratio}");
}

#[test]
fn e2train_populates_every_technique_metric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Scenario::E2train);
    let (out, rep) = run(&cfg, Some(dir.path()), None).unwrap();
    assert!(out.processed_steps < out.scheduled_steps);
    assert_eq!(out.psg_fractions.len(), out.processed_steps);
    assert!(out.gate_ledger.flops() > 0);
    let recs = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    let trained: Vec<_> = recs.iter().filter(|r| r.train_loss.is_some()).collect();
    assert!(trained.iter().all(|r| r.kept_mask.as_ref().is_some_and(|m| m.len() == 2)));
    assert!(trained.iter().all(|r| r.psg_predicted_fraction.is_some()));
    assert_eq!(rep.attribution.len(), 3);
}

#[test]
fn validation_fails_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Scenario::Smb);
    cfg.train.lr_decay_fractions = vec![0.75, 0.5];
    assert!(run(&cfg, Some(&dir.path().join("out")), None).is_err());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn compare_rows_follow_runs() {
    let cfg = tiny(Scenario::Smb);
    let dir = tempfile::tempdir().unwrap();
    run(&cfg, Some(dir.path()), None).unwrap();
    let base = RunSummary::load(dir.path()).unwrap();
    let model = CostModel::quadratic();
    let rows = compare(&base, &[base.clone(), base.clone()], &model).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], rows[1]);
    assert_eq!(rows[0].computational_savings, 0.0);
    assert!(compare(&base, &[], &model).is_err());
    let mut buf = Vec::new();
    harness::write_compare_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), COMPARE_HEADER.join(","));
    assert!(RunSummary::load(&dir.path().join("missing")).is_err());
}

#[test]
fn finetune_with_zero_iterations_changes_nothing() {
    let mut cfg = tiny(Scenario::E2train);
    cfg.train.iterations = 100;
    let rep = finetune_split(&cfg, 0).unwrap();
    assert_eq!(rep.last_layer_delta, 0.0);
    assert_eq!(rep.all_layer_delta, 0.0);
    assert_eq!(rep.last_layer_flops, 0);
}

#[test]
fn all_layer_finetune_with_skipping_costs_less_than_last_layer() {
    let mut cfg = tiny(Scenario::E2train);
    cfg.train.iterations = 100;
    cfg.slu.alpha = 0.3;
    cfg.slu.gate_lr = 0.1;
    let rep = finetune_split(&cfg, 100).unwrap();
    assert!(rep.all_layer_energy < rep.last_layer_energy, "{rep:?}");
    assert!(rep.extra_energy_savings > 0.0);
}

#[test]
fn snapshot_capture_and_replay() {
    let mut cfg = tiny(Scenario::Psg);
    cfg.train.iterations = 20;
    let empty = harness::capture_snapshots(&cfg, &[], 5).unwrap();
    assert!(empty.pairs.is_empty());
    let s = harness::capture_snapshots(&cfg, &["block0.conv1".to_string(), "fc".to_string()], 5).unwrap();
    assert_eq!(s.pairs.len(), 8);
    let dir = tempfile::tempdir().unwrap();
    s.save(dir.path()).unwrap();
    let back = ecotrain::psg_verify::SnapshotSampler::load(dir.path()).unwrap();
    assert_eq!(back.pairs.len(), s.pairs.len());
    assert!(back.pairs.iter().all(|p| s.pairs.contains(p)));
}
