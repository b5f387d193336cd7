//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::energy::EnergyLedger;
use crate::error::{Error, Result};
use crate::model::{ExactGrad, NoDraws, Gating, Network, PassConfig, Precision};
use crate::slu::{GateMode, GateNetwork};
use crate::tensor::Tensor;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Differentiable {
    fn param_count(&self) -> usize;
    fn get(&self, i: usize) -> f64;
    fn set(&mut self, i: usize, v: f64);
    fn loss(&mut self) -> Result<f64>;
    fn gradient(&mut self) -> Result<Vec<f64>>;
}

/// Smallest denominator of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Smallest step used when a coordinate sits next to a kink.
pub const MIN_EPS: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates whose difference quotient was taken at a reduced step.
    pub refined: usize,
}

fn one_sided<M: Differentiable + ?Sized>(model: &mut M, l0: f64, i: usize, eps: f64) -> Result<(f64, f64)> {
    let w = model.get(i);
    model.set(i, w + eps);
    let lp = model.loss()?;
    model.set(i, w - eps);
    let lm = model.loss()?;
    model.set(i, w);
    Ok(((lp - l0) / eps, (l0 - lm) / eps))
}

/// Compares the analytic gradient with central differences on up to
/// `max_samples` randomly chosen coordinates (all when fewer exist).
///
/// Away from kinks the gap between the one-sided quotients shrinks in
/// proportion to the step. When it does not, a ReLU kink lies inside
/// `[w - eps, w + eps]` and the coordinate is redone with a tenth of the
/// step, down to `MIN_EPS`.
pub fn finite_difference_check<M: Differentiable + ?Sized, R: Rng + ?Sized>(
    model: &mut M,
    eps: f64,
    max_samples: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let n = model.param_count();
    if n == 0 {
        return Err(Error::config("nothing to check"));
    }
    let grad = model.gradient()?;
    if grad.len() != n {
        return Err(Error::dim("gradient length", n, grad.len()));
    }
    let idx: Vec<usize> = if max_samples >= n {
        (0..n).collect()
    } else {
        sample(rng, n, max_samples).into_vec()
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: idx[0],
        checked: idx.len(),
        refined: 0,
    };
    let l0 = model.loss()?;
    for &i in &idx {
        let mut h = eps;
        let (mut fwd, mut bwd) = one_sided(model, l0, i, h)?;
        while h > MIN_EPS && (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(REL_ERR_FLOOR) {
            let h2 = (h / 10.0).max(MIN_EPS);
            let (f2, b2) = one_sided(model, l0, i, h2)?;
            let shrink = (f2 - b2).abs() / (fwd - bwd).abs();
            if (shrink - h2 / h).abs() <= 0.5 * h2 / h {
                break;
            }
            (h, fwd, bwd) = (h2, f2, b2);
        }
        if h < eps {
            report.refined += 1;
        }
        let num = 0.5 * (fwd + bwd);
        let e = relative_error(grad[i], num);
        if e > report.max_rel_err || e.is_nan() {
            report.max_rel_err = e;
            report.worst_index = i;
        }
    }
    Ok(report)
}

fn locate(tensors: &[&Tensor], mut i: usize) -> (usize, usize) {
    for (k, t) in tensors.iter().enumerate() {
        if i < t.len() {
            return (k, i);
        }
        i -= t.len();
    }
    panic!("parameter index out of range")
}

/// A network on a fixed batch, training-mode batchnorm without running
/// statistic updates. With a gate, blocks run under soft gating and the
/// gate parameters follow the network parameters in the flat vector.
#[derive(Debug, Clone)]
pub struct NetworkProbe {
    pub net: Network,
    pub gate: Option<GateNetwork>,
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub mask: Option<Vec<bool>>,
    pub alpha: f64,
}

impl NetworkProbe {
    pub fn new(net: Network, x: Tensor, labels: Vec<usize>) -> Self {
        Self {
            net,
            gate: None,
            x,
            labels,
            mask: None,
            alpha: 0.0,
        }
    }

    fn cfg() -> PassConfig {
        PassConfig {
            update_stats: false,
            ..PassConfig::train(Precision::full())
        }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.net.params();
        if let Some(g) = &self.gate {
            v.extend(g.params());
        }
        v
    }

    fn run(&mut self) -> Result<(f64, Vec<f64>)> {
        let mut rng = NoDraws;
        let gating = match (&self.gate, &self.mask) {
            (Some(g), _) => Gating::Learned {
                gate: g,
                mode: GateMode::Soft,
                rng: &mut rng,
            },
            (None, Some(m)) => Gating::Fixed(m),
            (None, None) => Gating::AllKeep,
        };
        let out = self.net.train_step(
            &self.x,
            &self.labels,
            gating,
            self.alpha,
            Self::cfg(),
            &mut EnergyLedger::new(),
            &mut ExactGrad { bits: 32 },
        )?;
        let mut flat = Vec::new();
        for (g, p) in out.param_grads.iter().zip(self.net.params()) {
            match g {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat_n(0.0, p.len())),
            }
        }
        if let Some(gg) = &out.gate_grads {
            for t in gg.params() {
                flat.extend_from_slice(t.data());
            }
        }
        Ok((out.loss.total, flat))
    }
}

impl Differentiable for NetworkProbe {
    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn get(&self, i: usize) -> f64 {
        let t = self.tensors();
        let (k, j) = locate(&t, i);
        t[k].data()[j]
    }

    fn set(&mut self, i: usize, v: f64) {
        let (k, j) = locate(&self.tensors(), i);
        let n_net = self.net.params().len();
        if k < n_net {
            self.net.params_mut()[k].data_mut()[j] = v;
        } else {
            self.gate.as_mut().expect("gate parameters").params_mut()[k - n_net].data_mut()[j] = v;
        }
    }

    fn loss(&mut self) -> Result<f64> {
        Ok(self.run()?.0)
    }

    fn gradient(&mut self) -> Result<Vec<f64>> {
        Ok(self.run()?.1)
    }
}
