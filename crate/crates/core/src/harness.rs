//! Experiment runner: builds data, model and optimizer from a
//! [`RunConfig`], trains, and reports metrics and savings.

use std::path::Path;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};
use crate::data::{
    load_cifar10_raw, smd_schedule, Batch, BatchSchedule, Dataset, EpochSampler, Prefetcher, SyntheticTask,
};
use crate::energy::{savings_report, Attribution, CostModel, EnergyLedger, SavingsReport};
use crate::error::{Error, Result};
use crate::metrics::{LedgerSnapshot, MetricsRecord, MetricsWriter};
use crate::model::{
    argmax_rows, ExactGrad, GradKernel, Gating, Network, PassConfig, Precision, WeightGradHook,
};
use crate::ops;
use crate::optim::{LrSchedule, OptimKind, OptimState, PsgHook, SwaState};
use crate::psg_verify::{SamplePair, SnapshotRecorder, SnapshotSampler};
use crate::slu::{mask_bits, GateMode, GateNetwork};
use crate::tensor::Tensor;

/// Independent seed for sub-stream `k` of a run seed.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r.next_u64()
}

const STREAM_INIT: u64 = 1;
const STREAM_SAMPLER: u64 = 2;
const STREAM_SCHEDULE: u64 = 3;
const STREAM_GATE: u64 = 4;
const STREAM_AUGMENT: u64 = 5;

/// Training and test sets for a config; the test set is normalized with
/// the training statistics.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let (mut train, mut test) = match d.source {
        DataSource::Synthetic => {
            let task = SyntheticTask::new(d.seed, d.classes, d.difficulty)?;
            (task.sample(d.n_train, 0)?, task.sample(d.n_test, 1)?)
        }
        DataSource::Cifar10 => (
            load_cifar10_raw(&d.train_files, d.subset_per_class)?,
            load_cifar10_raw(&d.test_files, None)?,
        ),
    };
    let (m, s) = train.normalize();
    test.normalize_with(&m, &s);
    Ok((train, test))
}

enum AnyHook {
    Exact(ExactGrad),
    Psg(PsgHook),
}

impl WeightGradHook for AnyHook {
    fn weight_grad(
        &mut self,
        layer: &str,
        kernel: GradKernel,
        x: &Tensor,
        g_y: &Tensor,
        w_shape: &[usize],
        ledger: &mut EnergyLedger,
    ) -> Result<Tensor> {
        match self {
            AnyHook::Exact(h) => h.weight_grad(layer, kernel, x, g_y, w_shape, ledger),
            AnyHook::Psg(h) => h.weight_grad(layer, kernel, x, g_y, w_shape, ledger),
        }
    }
}

/// Accuracy and mean kept ratio on the first `n` test images, with
/// deterministic gating and inference-mode batchnorm.
pub fn evaluate(
    net: &mut Network,
    gate: Option<&GateNetwork>,
    threshold: f64,
    data: &Dataset,
    n: usize,
    batch: usize,
) -> Result<(f64, f64)> {
    let n = n.min(data.len());
    if n == 0 {
        return Err(Error::config("nothing to evaluate"));
    }
    let mut correct = 0usize;
    let mut kept = 0usize;
    let mut gated = 0usize;
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let (x, y) = data.batch(&idx, None);
        let gating = match gate {
            Some(g) => Gating::Learned {
                gate: g,
                mode: GateMode::Deterministic { threshold },
                rng: &mut unused,
            },
            None => Gating::AllKeep,
        };
        let (logits, mask) = net.predict(&x, gating)?;
        correct += argmax_rows(&logits).iter().zip(&y).filter(|(a, b)| a == b).count();
        kept += mask.iter().filter(|&&k| k).count();
        gated += mask.len();
        start += batch;
    }
    let kept_ratio = if gated == 0 { 1.0 } else { kept as f64 / gated as f64 };
    Ok((correct as f64 / n as f64, kept_ratio))
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub scheduled_steps: usize,
    pub processed_steps: usize,
    pub final_accuracy: f64,
    pub eval_kept_ratio: f64,
    /// Kept fraction of blocks over all processed steps.
    pub train_kept_ratio: f64,
    /// Kept fraction over the last quarter of processed steps.
    pub tail_kept_ratio: f64,
    /// Mean task loss over the last 50 processed steps.
    pub final_loss: f64,
    /// Base-model operations.
    pub ledger: EnergyLedger,
    /// Gate operations.
    pub gate_ledger: EnergyLedger,
    /// Forward passes re-estimating batchnorm statistics after training.
    pub recalibration_ledger: EnergyLedger,
    pub psg_fractions: Vec<f64>,
    pub masks: Vec<Vec<bool>>,
    pub eval_history: Vec<(usize, f64)>,
    pub snapshots: Vec<SamplePair>,
    pub network: Network,
    pub gate: Option<GateNetwork>,
}

impl RunOutcome {
    pub fn total_ledger(&self) -> EnergyLedger {
        let mut l = self.ledger.clone();
        l.merge(&self.gate_ledger);
        l.merge(&self.recalibration_ledger);
        l
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            method: self.config.scenario.name().to_string(),
            seed: self.config.seed,
            scheduled_steps: self.scheduled_steps,
            processed_steps: self.processed_steps,
            final_accuracy: self.final_accuracy,
            eval_kept_ratio: self.eval_kept_ratio,
            train_kept_ratio: self.train_kept_ratio,
            psg_predicted_fraction: mean(&self.psg_fractions),
            model_ledger: self.ledger.clone(),
            gate_ledger: self.gate_ledger.clone(),
            recalibration_ledger: self.recalibration_ledger.clone(),
        }
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// The persisted part of a run, enough for savings comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub scheduled_steps: usize,
    pub processed_steps: usize,
    pub final_accuracy: f64,
    pub eval_kept_ratio: f64,
    pub train_kept_ratio: f64,
    pub psg_predicted_fraction: Option<f64>,
    pub model_ledger: EnergyLedger,
    pub gate_ledger: EnergyLedger,
    pub recalibration_ledger: EnergyLedger,
}

impl RunSummary {
    pub fn total_ledger(&self) -> EnergyLedger {
        let mut l = self.model_ledger.clone();
        l.merge(&self.gate_ledger);
        l.merge(&self.recalibration_ledger);
        l
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("ledger.json");
        let s = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Format {
            path: p,
            message: e.to_string(),
        })
    }
}

/// Savings of `run` against `baseline` with per-technique factors: data
/// (processed steps), model (FLOPs per processed step, gates included) and
/// precision (energy against the same operations at 32 bits).
pub fn savings(run: &RunSummary, baseline: &RunSummary, model: &CostModel) -> Result<SavingsReport> {
    let r = run.total_ledger();
    let b = baseline.total_ledger();
    let mut rep = savings_report(&r, &b, model)?;
    let per_step = |l: &EnergyLedger, n: usize| l.flops() as f64 / n.max(1) as f64;
    let data = run.processed_steps as f64 / baseline.processed_steps.max(1) as f64;
    let model_level = per_step(&r, run.processed_steps) / per_step(&b, baseline.processed_steps);
    let full = r.energy_at_full_precision(model);
    let precision = if full > 0.0 { r.energy(model) / full } else { 1.0 };
    rep.attribution = vec![
        Attribution {
            technique: "data".into(),
            factor: data,
        },
        Attribution {
            technique: "model".into(),
            factor: model_level,
        },
        Attribution {
            technique: "precision".into(),
            factor: precision,
        },
    ];
    Ok(rep)
}

fn make_batch(data: &Dataset, idx: &[usize], step: usize, augment_seed: Option<u64>) -> Batch {
    let mut rng = augment_seed.map(|s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        r.set_stream(step as u64);
        r
    });
    let (x, labels) = data.batch(idx, rng.as_mut());
    Batch { step, x, labels }
}

struct InlineBatches {
    data: Arc<Dataset>,
    schedule: BatchSchedule,
    sampler: EpochSampler,
    augment_seed: Option<u64>,
    step: usize,
}

impl Iterator for InlineBatches {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        while self.step < self.schedule.scheduled {
            let s = self.step;
            self.step += 1;
            let idx = self.sampler.next_batch();
            if self.schedule.is_kept(s) {
                return Some(make_batch(&self.data, &idx, s, self.augment_seed));
            }
        }
        None
    }
}

/// Trains on `train`, evaluating on `test`. `init` replaces the freshly
/// initialised network (used for fine-tuning). With `out_dir`, metrics
/// are streamed to `metrics.jsonl` there.
pub fn train_with(
    cfg: &RunConfig,
    train: Arc<Dataset>,
    test: &Dataset,
    init: Option<Network>,
    out_dir: Option<&Path>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let spec = cfg.network_spec();
    let [c, h, w] = train.image_shape();
    if c != spec.in_channels || h != spec.input_hw || w != spec.input_hw || train.num_classes != spec.num_classes {
        return Err(Error::config("dataset does not match the network input"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_INIT));
    let mut net = match init {
        Some(n) => {
            if n.spec != spec {
                return Err(Error::config("initial network does not match the configured architecture"));
            }
            n
        }
        None => Network::new(&spec, &mut init_rng)?,
    };
    let mut gate = cfg
        .slu
        .enabled
        .then(|| GateNetwork::new(spec.width, cfg.slu.head_bias, &mut init_rng));
    let scheduled = cfg.scheduled_iterations()?;
    let lr_sched = if scheduled > 0 {
        LrSchedule::from_fractions(cfg.optim.lr, scheduled, &cfg.train.lr_decay_fractions, cfg.train.lr_decay_factor)?
    } else {
        LrSchedule::new(cfg.optim.lr, 0, vec![], cfg.train.lr_decay_factor)?
    };
    let p = if cfg.smd.enabled { cfg.smd.p } else { 0.0 };
    let schedule = smd_schedule(scheduled, p, derive_seed(cfg.seed, STREAM_SCHEDULE))?;
    let sampler = EpochSampler::new(train.len(), cfg.train.batch_size, derive_seed(cfg.seed, STREAM_SAMPLER))?;
    let augment_seed = cfg.data.augment.then(|| derive_seed(cfg.seed, STREAM_AUGMENT));
    let mut batches: Box<dyn Iterator<Item = Batch>> = if cfg.data.prefetch {
        Box::new(Prefetcher::spawn(train.clone(), schedule.clone(), sampler, augment_seed))
    } else {
        Box::new(InlineBatches {
            data: train.clone(),
            schedule: schedule.clone(),
            sampler,
            augment_seed,
            step: 0,
        })
    };

    let precision = if cfg.quant.enabled {
        Precision::fixed_point(cfg.quant.act_bits, cfg.quant.grad_bits)
    } else {
        Precision::full()
    };
    let pass = PassConfig::train(precision);
    let inner = match cfg.optim.kind {
        OptimKind::Psg => AnyHook::Psg(PsgHook::new(cfg.quant.formats(), cfg.optim.beta)?),
        _ => AnyHook::Exact(ExactGrad {
            bits: precision.backward_bits,
        }),
    };
    let mut hook = SnapshotRecorder::new(inner, cfg.snapshot.layers.clone(), cfg.snapshot.every);
    let mut opt = OptimState::new(cfg.optim.kind, cfg.optim.momentum, cfg.optim.wd, &net.params())?;
    let mut gate_opt = match &gate {
        Some(g) => Some(OptimState::new(OptimKind::Sgd, cfg.slu.gate_momentum, 0.0, &g.params())?),
        None => None,
    };
    let mut gate_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_GATE));
    let mut swa = SwaState::default();
    let swa_start = cfg
        .optim
        .swa_start
        .map(|f| (f * scheduled as f64).round() as usize)
        .or(lr_sched.final_decay())
        .unwrap_or(0);

    let mut writer = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Some(MetricsWriter::create(&d.join("metrics.jsonl"))?)
        }
        None => None,
    };
    let mut ledger = EnergyLedger::new();
    let mut gate_ledger = EnergyLedger::new();
    let cost = CostModel::from_kind(cfg.energy.model);
    let mut processed = 0usize;
    let mut losses = Vec::new();
    let mut masks = Vec::new();
    let mut psg_fractions = Vec::new();
    let mut eval_history = Vec::new();
    let eval_n = cfg.train.eval_samples;

    for s in 0..scheduled {
        let lr = lr_sched.lr_at(s);
        let mut rec = None;
        if schedule.is_kept(s) {
            let batch = batches
                .next()
                .ok_or_else(|| Error::State(format!("batch stream ended before step {s}")))?;
            debug_assert_eq!(batch.step, s);
            hook.step = s;
            let gating = match &gate {
                Some(g) => Gating::Learned {
                    gate: g,
                    mode: GateMode::Sample,
                    rng: &mut gate_rng,
                },
                None => Gating::AllKeep,
            };
            let alpha = if gate.is_some() { cfg.slu.alpha } else { 0.0 };
            let out = net.train_step(&batch.x, &batch.labels, gating, alpha, pass, &mut ledger, &mut hook)?;
            processed += 1;
            opt.step(net.params_mut(), &out.param_grads, lr)?;
            if let (Some(g), Some(gg), Some(go)) = (gate.as_mut(), out.gate_grads.as_ref(), gate_opt.as_mut()) {
                let grads: Vec<Option<Tensor>> = gg.params().into_iter().map(|t| Some(t.clone())).collect();
                go.step(g.params_mut(), &grads, cfg.slu.gate_lr * lr / cfg.optim.lr)?;
            }
            gate_ledger.merge(&out.gate_ledger);
            let mut r = MetricsRecord::new(processed, s, lr);
            r.train_loss = Some(out.loss.task_loss);
            losses.push(out.loss.task_loss);
            if gate.is_some() {
                r.complexity = Some(out.loss.complexity);
                r.kept_mask = Some(mask_bits(&out.mask));
            }
            masks.push(out.mask);
            if let AnyHook::Psg(h) = &mut hook.inner {
                let f = h.take_stats().predicted_fraction();
                psg_fractions.push(f);
                r.psg_predicted_fraction = Some(f);
            }
            rec = Some(r);
        }
        if cfg.optim.swa && s >= swa_start && (s - swa_start).is_multiple_of(cfg.optim.swa_every) {
            swa.update(&net.params(), &net.running_stats())?;
        }
        let due_ledger = (s + 1) % cfg.train.ledger_every == 0;
        let due_eval = (s + 1) % cfg.train.eval_every == 0 && s + 1 < scheduled;
        if due_ledger || due_eval {
            let r = rec.get_or_insert_with(|| MetricsRecord::new(processed, s, lr));
            if due_ledger {
                let mut total = ledger.clone();
                total.merge(&gate_ledger);
                r.ledger = Some(LedgerSnapshot {
                    flops: total.flops(),
                    gate_flops: gate_ledger.flops(),
                    energy: total.energy(&cost),
                });
            }
            if due_eval {
                let (acc, kept) = evaluate(
                    &mut net,
                    gate.as_ref(),
                    cfg.slu.eval_threshold,
                    test,
                    eval_n,
                    cfg.train.eval_batch,
                )?;
                r.eval_accuracy = Some(acc);
                r.eval_kept_ratio = Some(kept);
                eval_history.push((s + 1, acc));
            }
        }
        if let (Some(w), Some(r)) = (writer.as_mut(), rec.as_ref()) {
            w.append(r)?;
        }
    }
    drop(batches);

    if swa.count > 0 {
        for (p, a) in net.params_mut().into_iter().zip(&swa.params) {
            *p = a.clone();
        }
        net.set_running_stats(&swa.stats)?;
    }
    let mut recalibration_ledger = EnergyLedger::new();
    let n_recal = cfg.train.bn_recalibration_samples.min(train.len());
    if n_recal > 0 {
        let batches: Vec<Tensor> = (0..n_recal)
            .step_by(cfg.train.eval_batch)
            .map(|a| {
                let idx: Vec<usize> = (a..(a + cfg.train.eval_batch).min(n_recal)).collect();
                train.batch(&idx, None).0
            })
            .collect();
        let gating = gate.as_ref().map(|g| (g, cfg.slu.eval_threshold));
        net.recalibrate_batchnorm(&batches, gating, &mut recalibration_ledger)?;
    }
    let (final_accuracy, eval_kept_ratio) = evaluate(
        &mut net,
        gate.as_ref(),
        cfg.slu.eval_threshold,
        test,
        test.len(),
        cfg.train.eval_batch,
    )?;
    eval_history.push((scheduled, final_accuracy));
    if let Some(w) = writer.as_mut() {
        let mut r = MetricsRecord::new(processed, scheduled, lr_sched.lr_at(scheduled));
        r.eval_accuracy = Some(final_accuracy);
        r.eval_kept_ratio = Some(eval_kept_ratio);
        let mut total = ledger.clone();
        total.merge(&gate_ledger);
        total.merge(&recalibration_ledger);
        r.ledger = Some(LedgerSnapshot {
            flops: total.flops(),
            gate_flops: gate_ledger.flops(),
            energy: total.energy(&cost),
        });
        w.append(&r)?;
    }
    let kept_ratio = |ms: &[Vec<bool>]| -> f64 {
        let (k, n) = ms.iter().fold((0usize, 0usize), |(k, n), m| {
            (k + m.iter().filter(|&&b| b).count(), n + m.len())
        });
        if n == 0 {
            1.0
        } else {
            k as f64 / n as f64
        }
    };
    let tail = &masks[masks.len() - masks.len() / 4..];
    let last = &losses[losses.len().saturating_sub(50)..];
    Ok(RunOutcome {
        config: cfg.clone(),
        scheduled_steps: scheduled,
        processed_steps: processed,
        final_accuracy,
        eval_kept_ratio,
        train_kept_ratio: kept_ratio(&masks),
        tail_kept_ratio: kept_ratio(if tail.is_empty() { &masks } else { tail }),
        final_loss: mean(last).unwrap_or(f64::NAN),
        ledger,
        gate_ledger,
        recalibration_ledger,
        psg_fractions,
        masks,
        eval_history,
        snapshots: std::mem::take(&mut hook.pairs),
        network: net,
        gate,
    })
}

const SUMMARY_HEADER: [&str; 12] = [
    "method",
    "seed",
    "scheduled_steps",
    "processed_steps",
    "final_accuracy",
    "eval_kept_ratio",
    "train_kept_ratio",
    "psg_predicted_fraction",
    "flops",
    "energy",
    "computational_savings",
    "energy_savings",
];

/// Loads data, trains and, with `out_dir`, writes `metrics.jsonl`,
/// `summary.csv`, `effective_config.toml`, `ledger.json` and any captured
/// snapshots. Savings are taken against `baseline`, or the run itself.
pub fn run(cfg: &RunConfig, out_dir: Option<&Path>, baseline: Option<&RunSummary>) -> Result<(RunOutcome, SavingsReport)> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let p = d.join("effective_config.toml");
        std::fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(&p, e))?;
    }
    let outcome = train_with(cfg, Arc::new(train), &test, None, out_dir)?;
    let summary = outcome.summary();
    let cost = CostModel::from_kind(cfg.energy.model);
    let report = savings(&summary, baseline.unwrap_or(&summary), &cost)?;
    if let Some(d) = out_dir {
        let p = d.join("ledger.json");
        std::fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&p, e))?;
        let p = d.join("summary.csv");
        let mut w = csv::Writer::from_path(&p).map_err(|e| csv_error(&p, e))?;
        let total = summary.total_ledger();
        let row = [
            summary.method.clone(),
            summary.seed.to_string(),
            summary.scheduled_steps.to_string(),
            summary.processed_steps.to_string(),
            summary.final_accuracy.to_string(),
            summary.eval_kept_ratio.to_string(),
            summary.train_kept_ratio.to_string(),
            summary.psg_predicted_fraction.map(|v| v.to_string()).unwrap_or_default(),
            total.flops().to_string(),
            total.energy(&cost).to_string(),
            report.computational_savings.to_string(),
            report.energy_savings.to_string(),
        ];
        w.write_record(SUMMARY_HEADER).map_err(|e| csv_error(&p, e))?;
        w.write_record(&row).map_err(|e| csv_error(&p, e))?;
        w.flush().map_err(|e| Error::io(&p, e))?;
        if !outcome.snapshots.is_empty() {
            SnapshotSampler::new(outcome.snapshots.clone()).save(&d.join("snapshots"))?;
        }
    }
    Ok((outcome, report))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Trains `cfg` with snapshot hooks on `layers` and returns the captured
/// `(x, g_y)` pairs as a replayable sampler.
pub fn capture_snapshots(cfg: &RunConfig, layers: &[String], every_k_steps: usize) -> Result<SnapshotSampler> {
    if layers.is_empty() {
        return Ok(SnapshotSampler::default());
    }
    let mut c = cfg.clone();
    c.snapshot.layers = layers.to_vec();
    c.snapshot.every = every_k_steps;
    let (out, _) = run(&c, None, None)?;
    Ok(SnapshotSampler::new(out.snapshots))
}

pub const COMPARE_HEADER: [&str; 4] = ["method", "Computational Savings (FLOPs)", "Energy Savings", "accuracy"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub computational_savings: f64,
    pub energy_savings: f64,
    pub accuracy: f64,
}

pub fn compare(baseline: &RunSummary, runs: &[RunSummary], model: &CostModel) -> Result<Vec<CompareRow>> {
    if runs.is_empty() {
        return Err(Error::config("nothing to compare against the baseline"));
    }
    runs.iter()
        .map(|r| {
            let s = savings(r, baseline, model)?;
            Ok(CompareRow {
                method: r.method.clone(),
                computational_savings: s.computational_savings,
                energy_savings: s.energy_savings,
                accuracy: r.final_accuracy,
            })
        })
        .collect()
}

pub fn write_compare_csv<W: std::io::Write>(rows: &[CompareRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Format {
        path: "compare.csv".into(),
        message: e.to_string(),
    };
    w.write_record(COMPARE_HEADER).map_err(err)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            format!("{:.4}", r.computational_savings),
            format!("{:.4}", r.energy_savings),
            format!("{:.4}", r.accuracy),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub pretrained_accuracy: f64,
    /// Option 1: standard training of the classifier only.
    pub last_layer_accuracy: f64,
    /// Option 2: all layers under the configured energy-saving techniques.
    pub all_layer_accuracy: f64,
    pub last_layer_delta: f64,
    pub all_layer_delta: f64,
    pub last_layer_energy: f64,
    pub all_layer_energy: f64,
    pub last_layer_flops: u64,
    pub all_layer_flops: u64,
    /// `1 - energy(option 2) / energy(option 1)`.
    pub extra_energy_savings: f64,
}

/// Last-layer-only fine-tuning with plain SGD: full forward passes, a
/// backward pass through the classifier only.
fn finetune_last_layer(
    net: &mut Network,
    cfg: &RunConfig,
    data: &Dataset,
    iterations: usize,
    ledger: &mut EnergyLedger,
) -> Result<()> {
    if iterations == 0 {
        return Ok(());
    }
    let mut sampler = EpochSampler::new(data.len(), cfg.train.batch_size, derive_seed(cfg.seed, STREAM_SAMPLER))?;
    let lr_sched = LrSchedule::from_fractions(0.1, iterations, &cfg.train.lr_decay_fractions, cfg.train.lr_decay_factor)?;
    let pass = PassConfig {
        update_stats: false,
        ..PassConfig::train(Precision::full())
    };
    let mut vel = [Tensor::zeros(net.fc.w.shape()), Tensor::zeros(net.fc.b.shape())];
    let mut hook = ExactGrad { bits: 32 };
    for s in 0..iterations {
        let (x, y) = data.batch(&sampler.next_batch(), None);
        let out = net.forward(&x, Gating::AllKeep, pass, ledger)?;
        let (_, g) = ops::softmax_cross_entropy(&out.logits, &y, ledger, 32)?;
        let b = net.fc.backward(&g, "fc", pass, ledger, &mut hook)?;
        let lr = lr_sched.lr_at(s);
        crate::optim::sgd_step(&mut net.fc.w, &mut vel[0], &b.g_w[0], lr, 0.9, cfg.optim.wd)?;
        crate::optim::sgd_step(&mut net.fc.b, &mut vel[1], &b.g_w[1], lr, 0.9, cfg.optim.wd)?;
    }
    Ok(())
}

/// Pretrains on one stratified half with standard training, then compares
/// classifier-only fine-tuning against all-layer fine-tuning under `cfg`'s
/// techniques on the other half, for `finetune_iterations` each.
pub fn finetune_split(cfg: &RunConfig, finetune_iterations: usize) -> Result<FinetuneReport> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let (a, b) = train.stratified_halves(derive_seed(cfg.seed, 9))?;
    let mut pre_cfg = RunConfig::for_scenario(crate::config::Scenario::Smb);
    pre_cfg.seed = cfg.seed;
    pre_cfg.model = cfg.model.clone();
    pre_cfg.data = cfg.data.clone();
    pre_cfg.train = cfg.train.clone();
    let pre = train_with(&pre_cfg, Arc::new(a), &test, None, None)?;
    let mut pretrained = pre.network;
    let cost = CostModel::from_kind(cfg.energy.model);
    let (pre_acc, _) = evaluate(&mut pretrained, None, 0.5, &test, test.len(), cfg.train.eval_batch)?;

    let mut opt1 = pretrained.clone();
    let mut l1 = EnergyLedger::new();
    finetune_last_layer(&mut opt1, cfg, &b, finetune_iterations, &mut l1)?;
    let (acc1, _) = evaluate(&mut opt1, None, 0.5, &test, test.len(), cfg.train.eval_batch)?;

    let (acc2, l2) = if finetune_iterations == 0 {
        (pre_acc, EnergyLedger::new())
    } else {
        let mut c2 = cfg.clone();
        c2.train.iterations = finetune_iterations;
        let out = train_with(&c2, Arc::new(b), &test, Some(pretrained.clone()), None)?;
        (out.final_accuracy, out.total_ledger())
    };
    let (e1, e2) = (l1.energy(&cost), l2.energy(&cost));
    Ok(FinetuneReport {
        pretrained_accuracy: pre_acc,
        last_layer_accuracy: acc1,
        all_layer_accuracy: acc2,
        last_layer_delta: acc1 - pre_acc,
        all_layer_delta: acc2 - pre_acc,
        last_layer_energy: e1,
        all_layer_energy: e2,
        last_layer_flops: l1.flops(),
        all_layer_flops: l2.flops(),
        extra_energy_savings: if e1 > 0.0 { 1.0 - e2 / e1 } else { 0.0 },
    })
}
