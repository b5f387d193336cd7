//! Monte-Carlo check of the sign-prediction failure bound.
//!
//! Everything is evaluated in normalized units: each operand is divided by
//! its power-of-two dynamic scale so that it lies in `[-1, 1]`, where the
//! predictor step sizes are `2^-(B-1)`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::EnergyLedger;
use crate::error::{Error, Result};
use crate::model::{GradKernel, WeightGradHook};
use crate::quant::{dynamic_scale, quantize, FixedPointFormat};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Event {
    None,
    H0,
    Hp,
    Hn,
}

/// Which failure case, if any, a predictor-branch decision falls into.
pub fn classify_event(g_w: f64, g_w_msb: f64, tau: f64) -> Event {
    if g_w == 0.0 && g_w_msb.abs() > tau {
        Event::H0
    } else if g_w > 0.0 && g_w_msb < -tau {
        Event::Hp
    } else if g_w < 0.0 && g_w_msb > tau {
        Event::Hn
    } else {
        Event::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventSample {
    pub g_w: f64,
    pub g_w_msb: f64,
    pub tau: f64,
    pub event: Event,
}

impl EventSample {
    pub fn new(g_w: f64, g_w_msb: f64, tau: f64) -> Self {
        Self {
            g_w,
            g_w_msb,
            tau,
            event: classify_event(g_w, g_w_msb, tau),
        }
    }
}

/// Predictor widths, and optionally the widths the full operands are held
/// at (`None` keeps them as reals).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyFormats {
    pub x_msb_bits: u32,
    pub g_msb_bits: u32,
    pub x_full_bits: Option<u32>,
    pub g_full_bits: Option<u32>,
}

impl VerifyFormats {
    pub fn predictors(x_msb_bits: u32, g_msb_bits: u32) -> Self {
        Self {
            x_msb_bits,
            g_msb_bits,
            x_full_bits: None,
            g_full_bits: None,
        }
    }

    pub fn delta_x(&self) -> f64 {
        2f64.powi(-(self.x_msb_bits as i32 - 1))
    }

    pub fn delta_g(&self) -> f64 {
        2f64.powi(-(self.g_msb_bits as i32 - 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Threshold {
    /// Absolute threshold in normalized units.
    Fixed(f64),
    /// `beta * max|g_w^msb|` per sample pair.
    Adaptive(f64),
}

/// One layer's cached input and output gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub layer: String,
    pub step: usize,
    pub kernel: GradKernel,
    pub w_shape: Vec<usize>,
    pub x: Tensor,
    pub g_y: Tensor,
}

pub trait PairSampler {
    fn next_pair(&mut self) -> Option<SamplePair>;
}

/// Dense-layer pairs with i.i.d. Gaussian activations and gradients.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    rng: ChaCha8Rng,
    pub batch: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub sigma: f64,
}

impl GaussianSampler {
    pub fn new(seed: u64, batch: usize, d_in: usize, d_out: usize, sigma: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch,
            d_in,
            d_out,
            sigma,
        }
    }
}

impl PairSampler for GaussianSampler {
    fn next_pair(&mut self) -> Option<SamplePair> {
        Some(SamplePair {
            layer: "gaussian".into(),
            step: 0,
            kernel: GradKernel::Dense,
            w_shape: vec![self.d_out, self.d_in],
            x: Tensor::randn(&[self.batch, self.d_in], self.sigma, &mut self.rng),
            g_y: Tensor::randn(&[self.batch, self.d_out], self.sigma, &mut self.rng),
        })
    }
}

/// Replays captured pairs once, in order.
#[derive(Debug, Clone, Default)]
pub struct SnapshotSampler {
    pub pairs: Vec<SamplePair>,
    pos: usize,
}

impl SnapshotSampler {
    pub fn new(pairs: Vec<SamplePair>) -> Self {
        Self { pairs, pos: 0 }
    }

    pub fn entries(&self) -> usize {
        self.pairs.iter().map(|p| p.w_shape.iter().product::<usize>()).sum()
    }

    fn file_name(p: &SamplePair) -> String {
        format!("step{:08}_{}.json", p.step, p.layer)
    }

    /// One JSON file per pair; file names carry step and layer.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for p in &self.pairs {
            let path = dir.join(Self::file_name(p));
            let s = serde_json::to_string(p)?;
            std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let mut pairs = Vec::with_capacity(files.len());
        for f in files {
            let s = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
            let p: SamplePair = serde_json::from_str(&s).map_err(|e| Error::Format {
                path: f.clone(),
                message: e.to_string(),
            })?;
            pairs.push(p);
        }
        Ok(Self::new(pairs))
    }
}

impl PairSampler for SnapshotSampler {
    fn next_pair(&mut self) -> Option<SamplePair> {
        let p = self.pairs.get(self.pos).cloned();
        self.pos += 1;
        p
    }
}

/// Wraps a weight-gradient hook and records `(x, g_y)` of chosen layers
/// every `every` steps.
pub struct SnapshotRecorder<H> {
    pub inner: H,
    pub layers: Vec<String>,
    pub every: usize,
    pub step: usize,
    pub pairs: Vec<SamplePair>,
}

impl<H> SnapshotRecorder<H> {
    pub fn new(inner: H, layers: Vec<String>, every: usize) -> Self {
        Self {
            inner,
            layers,
            every: every.max(1),
            step: 0,
            pairs: Vec::new(),
        }
    }
}

impl<H: WeightGradHook> WeightGradHook for SnapshotRecorder<H> {
    fn weight_grad(
        &mut self,
        layer: &str,
        kernel: GradKernel,
        x: &Tensor,
        g_y: &Tensor,
        w_shape: &[usize],
        ledger: &mut EnergyLedger,
    ) -> Result<Tensor> {
        if self.step.is_multiple_of(self.every) && self.layers.iter().any(|l| l == layer) {
            self.pairs.push(SamplePair {
                layer: layer.to_string(),
                step: self.step,
                kernel,
                w_shape: w_shape.to_vec(),
                x: x.clone(),
                g_y: g_y.clone(),
            });
        }
        self.inner.weight_grad(layer, kernel, x, g_y, w_shape, ledger)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EventCounts {
    pub total: u64,
    pub h0: u64,
    pub hp: u64,
    pub hn: u64,
}

impl EventCounts {
    pub fn failures(&self) -> u64 {
        self.h0 + self.hp + self.hn
    }

    fn add(&mut self, e: Event) {
        self.total += 1;
        match e {
            Event::H0 => self.h0 += 1,
            Event::Hp => self.hp += 1,
            Event::Hn => self.hn += 1,
            Event::None => {}
        }
    }
}

/// Wilson score interval at 95%.
pub fn wilson_interval(successes: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let centre = (p + z * z / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes == n { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

#[derive(Debug, Clone, Default)]
struct MeanAcc {
    n: u64,
    sum: f64,
    sum_sq: f64,
}

impl MeanAcc {
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }

    /// Normal-approximation half width at 95%.
    fn half_width(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let var = ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0);
        1.96 * (var / n).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub delta_x: f64,
    pub delta_g: f64,
    /// Estimate of `E1`.
    pub e1: f64,
    /// Estimate of `E2` with `||x_n||^2` in both terms.
    pub e2: f64,
    /// Estimate of `E2` with `||g_y,n||^2` in the zero-gradient term, as
    /// the closing display writes it.
    pub e2_literal: f64,
    pub bound: f64,
    pub bound_ci: f64,
    pub bound_literal: f64,
    pub bound_literal_ci: f64,
    pub counts: EventCounts,
    pub rate: f64,
    pub rate_ci: (f64, f64),
    /// Entries resolved by the predictor branch.
    pub predicted: u64,
    pub warnings: Vec<String>,
}

/// Normalized operand at `full` bits (or as is) and its `msb`-bit prefix.
fn normalized_parts(t: &Tensor, full: Option<u32>, msb: u32) -> Result<(Tensor, Tensor)> {
    let s = dynamic_scale(t);
    let mut v = t.scale(1.0 / s);
    if let Some(b) = full {
        v = quantize(&v, FixedPointFormat::unit(b)?, 1.0)?.values;
        if msb >= b {
            return Ok((v.clone(), v));
        }
    }
    let m = quantize(&v, FixedPointFormat::unit(msb)?, 1.0)?.values;
    Ok((v, m))
}

/// Per-entry sums `sum_n ||x_n||^2` and `sum_n ||g_y,n||^2` in the weight
/// layout, obtained by running the gradient kernel on squared operands.
fn entry_norms(kernel: GradKernel, x: &Tensor, g: &Tensor, w_shape: &[usize]) -> Result<(Tensor, Tensor)> {
    let xx = kernel.apply(&x.map(|v| v * v), &Tensor::ones(g.shape()), w_shape)?;
    let gg = kernel.apply(&Tensor::ones(x.shape()), &g.map(|v| v * v), w_shape)?;
    Ok((xx, gg))
}

/// Estimates the failure rate of the predictor branch and the bound
/// `dx^2 E1 + dg^2 E2` over at least `n_samples` weight-gradient entries.
pub fn monte_carlo_failure_rate(
    sampler: &mut dyn PairSampler,
    formats: &VerifyFormats,
    threshold: Threshold,
    n_samples: usize,
) -> Result<BoundEstimate> {
    if n_samples < 10_000 {
        return Err(Error::config(format!("need at least 10^4 samples, got {n_samples}")));
    }
    match threshold {
        Threshold::Fixed(t) if !(t > 0.0) => return Err(Error::config("fixed threshold must be positive")),
        Threshold::Adaptive(b) if !(b > 0.0 && b < 1.0) => {
            return Err(Error::config(format!("beta must be in (0, 1), got {b}")))
        }
        _ => {}
    }
    let (dx2, dg2) = (formats.delta_x().powi(2), formats.delta_g().powi(2));
    let mut counts = EventCounts::default();
    let mut predicted = 0u64;
    let (mut e1, mut e2, mut e2l) = (MeanAcc::default(), MeanAcc::default(), MeanAcc::default());
    let (mut b, mut bl) = (MeanAcc::default(), MeanAcc::default());
    let mut warnings = Vec::new();
    let mut degenerate = 0usize;
    while (counts.total as usize) < n_samples {
        let Some(pair) = sampler.next_pair() else {
            warnings.push(format!("sampler exhausted after {} entries", counts.total));
            break;
        };
        let (x, xm) = normalized_parts(&pair.x, formats.x_full_bits, formats.x_msb_bits)?;
        let (g, gm) = normalized_parts(&pair.g_y, formats.g_full_bits, formats.g_msb_bits)?;
        let k = pair.kernel;
        let gw = k.apply(&x, &g, &pair.w_shape)?;
        let gw_msb = k.apply(&xm, &gm, &pair.w_shape)?;
        let tau = match threshold {
            Threshold::Fixed(t) => t,
            Threshold::Adaptive(beta) => beta * gw_msb.max_abs(),
        };
        if tau == 0.0 {
            degenerate += 1;
            continue;
        }
        // first-order predictor noise q_w = sum x q_g + q_x g
        let q = k
            .apply(&x, &gm.sub(&g)?, &pair.w_shape)?
            .add(&k.apply(&xm.sub(&x)?, &g, &pair.w_shape)?)?;
        let (sx, sg) = entry_norms(k, &x, &g, &pair.w_shape)?;
        for i in 0..gw.len() {
            let (w, m) = (gw.data()[i], gw_msb.data()[i]);
            if m.abs() >= tau {
                predicted += 1;
            }
            counts.add(classify_event(w, m, tau));
            let (a, c) = (sg.data()[i], sx.data()[i]);
            let (t1, t2, t2l) = if w == 0.0 {
                let z = 12.0 * tau * tau;
                (a / z, c / z, a / z)
            } else {
                let d = 24.0 * (q.data()[i] + tau).powi(2);
                (a / d, c / d, c / d)
            };
            e1.push(t1);
            e2.push(t2);
            e2l.push(t2l);
            b.push(dx2 * t1 + dg2 * t2);
            bl.push(dx2 * t1 + dg2 * t2l);
        }
    }
    if degenerate > 0 {
        warnings.push(format!("{degenerate} all-zero sample pairs skipped (threshold 0)"));
    }
    if counts.total == 0 {
        warnings.push("degenerate sampler: no usable entries; bound and rate are both 0".into());
    }
    let rate = if counts.total == 0 {
        0.0
    } else {
        counts.failures() as f64 / counts.total as f64
    };
    Ok(BoundEstimate {
        delta_x: formats.delta_x(),
        delta_g: formats.delta_g(),
        e1: e1.mean(),
        e2: e2.mean(),
        e2_literal: e2l.mean(),
        bound: b.mean(),
        bound_ci: b.half_width(),
        bound_literal: bl.mean(),
        bound_literal_ci: bl.half_width(),
        counts,
        rate,
        rate_ci: wilson_interval(counts.failures(), counts.total),
        predicted,
        warnings,
    })
}
