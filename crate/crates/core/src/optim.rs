//! Update rules: momentum SGD, SignSGD, predictive sign gradients and
//! stochastic weight averaging.

use serde::{Deserialize, Serialize};

use crate::energy::{EnergyLedger, OpClass};
use crate::error::{Error, Result};
use crate::model::{GradKernel, WeightGradHook};
use crate::quant::{msb_split, quantize_dynamic, FixedPointFormat};
use crate::tensor::Tensor;

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `v' = m*v + g + wd*w`, `w' = w - lr*v'`.
pub fn sgd_step(w: &mut Tensor, v: &mut Tensor, g: &Tensor, lr: f64, momentum: f64, wd: f64) -> Result<()> {
    g.expect_shape("sgd gradient", w.shape())?;
    v.expect_shape("sgd velocity", w.shape())?;
    for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
        *vi = momentum * *vi + gi + wd * *wi;
        *wi -= lr * *vi;
    }
    Ok(())
}

/// `w' = w - lr*(sgn(g) + wd*w)` with `sgn(0) = 0`.
pub fn signsgd_step(w: &mut Tensor, g: &Tensor, lr: f64, wd: f64) -> Result<()> {
    g.expect_shape("signsgd gradient", w.shape())?;
    for (wi, gi) in w.data_mut().iter_mut().zip(g.data()) {
        *wi -= lr * (sgn(*gi) + wd * *wi);
    }
    Ok(())
}

/// Running mean `(avg*n + w)/(n+1)`.
pub fn swa_update(avg: &Tensor, w: &Tensor, n: u64) -> Result<(Tensor, u64)> {
    if n == 0 {
        return Ok((w.clone(), 1));
    }
    let nf = n as f64;
    let out = avg.zip_map(w, |a, b| (a * nf + b) / (nf + 1.0))?;
    Ok((out, n + 1))
}

/// Running average of a whole parameter list plus batchnorm statistics.
#[derive(Debug, Clone, Default)]
pub struct SwaState {
    pub count: u64,
    pub params: Vec<Tensor>,
    pub stats: Vec<f64>,
}

impl SwaState {
    pub fn update(&mut self, params: &[&Tensor], stats: &[f64]) -> Result<()> {
        if self.count == 0 {
            self.params = params.iter().map(|p| (*p).clone()).collect();
            self.stats = stats.to_vec();
            self.count = 1;
            return Ok(());
        }
        if params.len() != self.params.len() {
            return Err(Error::dim("swa parameter count", self.params.len(), params.len()));
        }
        if stats.len() != self.stats.len() {
            return Err(Error::dim("swa statistics", self.stats.len(), stats.len()));
        }
        let n = self.count;
        for (avg, p) in self.params.iter_mut().zip(params) {
            *avg = swa_update(avg, p, n)?.0;
        }
        let nf = n as f64;
        for (a, s) in self.stats.iter_mut().zip(stats) {
            *a = (*a * nf + s) / (nf + 1.0);
        }
        self.count += 1;
        Ok(())
    }
}

/// Piecewise-constant learning rate over scheduled steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub decay_steps: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, total_steps: usize, decay_steps: Vec<usize>, factor: f64) -> Result<Self> {
        if !(base_lr.is_finite() && base_lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {base_lr}")));
        }
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::config("decay factor must be positive"));
        }
        if decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("decay points must be strictly increasing"));
        }
        if decay_steps.last().is_some_and(|&d| d >= total_steps) {
            return Err(Error::config("decay points must lie inside the step budget"));
        }
        Ok(Self {
            base_lr,
            total_steps,
            decay_steps,
            factor,
        })
    }

    /// Decays by `factor` at the given fractions of the budget.
    pub fn from_fractions(base_lr: f64, total_steps: usize, fractions: &[f64], factor: f64) -> Result<Self> {
        let steps = fractions
            .iter()
            .map(|f| (f * total_steps as f64).round() as usize)
            .collect();
        Self::new(base_lr, total_steps, steps, factor)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let n = self.decay_steps.iter().filter(|&&d| step >= d).count();
        self.base_lr * self.factor.powi(n as i32)
    }

    pub fn final_decay(&self) -> Option<usize> {
        self.decay_steps.last().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    #[default]
    Sgd,
    Signsgd,
    Psg,
}

/// Momentum buffers and the update rule they belong to.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub kind: OptimKind,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl OptimState {
    pub fn new(kind: OptimKind, momentum: f64, weight_decay: f64, params: &[&Tensor]) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(Self {
            kind,
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        })
    }

    /// Updates every parameter whose gradient is present; `None` entries
    /// are left bit-identical, momentum included.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::dim("optimizer parameter count", self.velocity.len(), grads.len()));
        }
        for ((w, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            match self.kind {
                OptimKind::Sgd => sgd_step(w, v, g, lr, self.momentum, self.weight_decay)?,
                OptimKind::Signsgd | OptimKind::Psg => signsgd_step(w, g, lr, self.weight_decay)?,
            }
        }
        Ok(())
    }
}

/// Bit widths of the full and predictor formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsgFormats {
    pub act_bits: u32,
    pub act_msb_bits: u32,
    pub grad_bits: u32,
    pub grad_msb_bits: u32,
}

impl Default for PsgFormats {
    fn default() -> Self {
        Self {
            act_bits: 8,
            act_msb_bits: 4,
            grad_bits: 16,
            grad_msb_bits: 10,
        }
    }
}

impl PsgFormats {
    pub fn validate(&self) -> Result<()> {
        if self.act_msb_bits >= self.act_bits || self.grad_msb_bits >= self.grad_bits {
            return Err(Error::config("predictor widths must be narrower than the full widths"));
        }
        Ok(())
    }
}

/// Outcome counts of one or more predictive-sign evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PsgStepStats {
    pub entries: u64,
    /// Entries resolved by the predictor branch.
    pub predicted: u64,
    /// Emitted signs that differ from the sign of the full-width gradient.
    pub flips: u64,
    /// Largest threshold seen.
    pub tau: f64,
}

impl PsgStepStats {
    pub fn predicted_fraction(&self) -> f64 {
        if self.entries == 0 {
            return 1.0;
        }
        self.predicted as f64 / self.entries as f64
    }

    pub fn fallback_fraction(&self) -> f64 {
        1.0 - self.predicted_fraction()
    }

    pub fn merge(&mut self, o: &PsgStepStats) {
        self.entries += o.entries;
        self.predicted += o.predicted;
        self.flips += o.flips;
        self.tau = self.tau.max(o.tau);
    }
}

/// Operands quantized to their full widths plus their predictor prefixes.
pub struct PsgOperands {
    pub x: Tensor,
    pub x_msb: Tensor,
    pub g: Tensor,
    pub g_msb: Tensor,
    pub x_scale: f64,
    pub g_scale: f64,
}

pub fn psg_operands(x: &Tensor, g_y: &Tensor, f: &PsgFormats) -> Result<PsgOperands> {
    f.validate()?;
    let xq = quantize_dynamic(x, f.act_bits)?;
    let gq = quantize_dynamic(g_y, f.grad_bits)?;
    let (xm, _) = msb_split(
        &xq.values,
        FixedPointFormat::unit(f.act_bits)?,
        FixedPointFormat::unit(f.act_msb_bits)?,
        xq.scale,
    )?;
    let (gm, _) = msb_split(
        &gq.values,
        FixedPointFormat::unit(f.grad_bits)?,
        FixedPointFormat::unit(f.grad_msb_bits)?,
        gq.scale,
    )?;
    Ok(PsgOperands {
        x: xq.values,
        x_msb: xm.values,
        g: gq.values,
        g_msb: gm.values,
        x_scale: xq.scale,
        g_scale: gq.scale,
    })
}

/// Predictive sign of a weight gradient.
///
/// The predictor gradient comes from the MSB parts of `x` and `g_y`. Entries
/// whose predictor magnitude reaches `beta * max|predictor|` take its sign;
/// the rest take the sign of the gradient computed at the full widths. All
/// entries are charged at predictor precision, fallback entries in addition
/// at full precision.
pub fn psg_weight_grad(
    x: &Tensor,
    g_y: &Tensor,
    kernel: GradKernel,
    w_shape: &[usize],
    formats: &PsgFormats,
    beta: f64,
    ledger: &mut EnergyLedger,
) -> Result<(Tensor, PsgStepStats)> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::config(format!("beta must be in (0, 1), got {beta}")));
    }
    let ops = psg_operands(x, g_y, formats)?;
    let g_msb = kernel.apply(&ops.x_msb, &ops.g_msb, w_shape)?;
    let g_full = kernel.apply(&ops.x, &ops.g, w_shape)?;
    let tau = beta * g_msb.max_abs();
    let mut predicted = 0u64;
    let mut flips = 0u64;
    let signs: Vec<f64> = g_msb
        .data()
        .iter()
        .zip(g_full.data())
        .map(|(&m, &f)| {
            let s = if m.abs() >= tau {
                predicted += 1;
                sgn(m)
            } else {
                sgn(f)
            };
            if s != sgn(f) {
                flips += 1;
            }
            s
        })
        .collect();
    let entries = g_msb.len() as u64;
    let macs = kernel.macs(x.shape(), w_shape)?;
    let msb_bits = formats.act_msb_bits.max(formats.grad_msb_bits);
    ledger.add(OpClass::Multiply, macs, msb_bits);
    ledger.add(OpClass::Add, macs, msb_bits);
    ledger.add(OpClass::DataMove, macs, formats.act_msb_bits);
    ledger.add(OpClass::DataMove, macs, formats.grad_msb_bits);
    // threshold comparison per entry
    ledger.add(OpClass::Add, entries, msb_bits);
    let fallback = entries - predicted;
    let fb_macs = macs / entries.max(1) * fallback;
    let full_bits = formats.act_bits.max(formats.grad_bits);
    ledger.add(OpClass::Multiply, fb_macs, full_bits);
    ledger.add(OpClass::Add, fb_macs, full_bits);
    ledger.add(OpClass::DataMove, fb_macs, formats.act_bits);
    ledger.add(OpClass::DataMove, fb_macs, formats.grad_bits);
    Ok((
        Tensor::new(w_shape.to_vec(), signs)?,
        PsgStepStats {
            entries,
            predicted,
            flips,
            tau,
        },
    ))
}

/// Weight-gradient hook that emits predictive signs and accumulates stats
/// until [`PsgHook::take_stats`] is called.
#[derive(Debug, Clone)]
pub struct PsgHook {
    pub formats: PsgFormats,
    pub beta: f64,
    stats: PsgStepStats,
}

impl PsgHook {
    pub fn new(formats: PsgFormats, beta: f64) -> Result<Self> {
        formats.validate()?;
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::config(format!("beta must be in (0, 1), got {beta}")));
        }
        Ok(Self {
            formats,
            beta,
            stats: PsgStepStats::default(),
        })
    }

    pub fn take_stats(&mut self) -> PsgStepStats {
        std::mem::take(&mut self.stats)
    }
}

impl WeightGradHook for PsgHook {
    fn weight_grad(
        &mut self,
        _layer: &str,
        kernel: GradKernel,
        x: &Tensor,
        g_y: &Tensor,
        w_shape: &[usize],
        ledger: &mut EnergyLedger,
    ) -> Result<Tensor> {
        let (s, st) = psg_weight_grad(x, g_y, kernel, w_shape, &self.formats, self.beta, ledger)?;
        self.stats.merge(&st);
        Ok(s)
    }
}
