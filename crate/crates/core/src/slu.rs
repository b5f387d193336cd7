//! Selective layer update: a recurrent gate shared by every residual block
//! decides, once per mini-batch, which blocks run forward and backward.
//!
//! Each gate step pools the block input over batch and space, projects the
//! pooled vector to 10 dimensions, advances a 10-unit LSTM and emits a keep
//! probability through a sigmoid head. The recurrent state starts at zero for
//! every mini-batch and is carried from block to block.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::energy::EnergyLedger;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GATE_DIM: usize = 10;
const GATE_BITS: u32 = 32;

/// Shared gate parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateNetwork {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl GateNetwork {
    /// Random projection and recurrent weights; the output head starts at
    /// zero weight and `head_bias`, so the initial probability is
    /// `sigmoid(head_bias)` for every input.
    pub fn new<R: Rng + ?Sized>(channels: usize, head_bias: f64, rng: &mut R) -> Self {
        let d = GATE_DIM;
        Self {
            proj_w: Tensor::randn(&[d, channels], (1.0 / channels as f64).sqrt(), rng),
            proj_b: Tensor::zeros(&[d]),
            w_ih: Tensor::randn(&[4 * d, d], (1.0 / d as f64).sqrt(), rng),
            w_hh: Tensor::randn(&[4 * d, d], (1.0 / d as f64).sqrt(), rng),
            b: Tensor::zeros(&[4 * d]),
            head_w: Tensor::zeros(&[d]),
            head_b: Tensor::scalar(head_bias),
        }
    }

    pub fn channels(&self) -> usize {
        self.proj_w.shape()[1]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.proj_w,
            &self.proj_b,
            &self.w_ih,
            &self.w_hh,
            &self.b,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.w_ih,
            &mut self.w_hh,
            &mut self.b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            proj_w: Tensor::zeros(self.proj_w.shape()),
            proj_b: Tensor::zeros(self.proj_b.shape()),
            w_ih: Tensor::zeros(self.w_ih.shape()),
            w_hh: Tensor::zeros(self.w_hh.shape()),
            b: Tensor::zeros(self.b.shape()),
            head_w: Tensor::zeros(self.head_w.shape()),
            head_b: Tensor::zeros(self.head_b.shape()),
        }
    }

    /// Forward FLOPs of one gate step on a block input of `elements` values,
    /// excluding the pooling.
    pub fn step_flops(&self) -> u64 {
        let mut l = EnergyLedger::new();
        charge_cell(&mut l, self.channels());
        l.flops()
    }
}

/// How a probability turns into a keep/skip decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GateMode {
    /// Keep with probability `prob` (training).
    Sample,
    /// Keep when `prob >= threshold` (evaluation).
    Deterministic { threshold: f64 },
    /// Always execute the block, scaled by `prob`; the relaxation used to
    /// check gate gradients.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub prob: f64,
    pub keep: bool,
    pub block_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GateState {
    pub h: [f64; GATE_DIM],
    pub c: [f64; GATE_DIM],
}

/// Values one gate step keeps for backpropagation through time.
#[derive(Debug, Clone)]
pub struct GateStepCache {
    features: Vec<f64>,
    z: [f64; GATE_DIM],
    h_prev: [f64; GATE_DIM],
    c_prev: [f64; GATE_DIM],
    i: [f64; GATE_DIM],
    f: [f64; GATE_DIM],
    g: [f64; GATE_DIM],
    o: [f64; GATE_DIM],
    tanh_c: [f64; GATE_DIM],
    h: [f64; GATE_DIM],
    prob: f64,
    /// Number of elements averaged into each pooled feature.
    pub pooled_count: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn charge_cell(ledger: &mut EnergyLedger, channels: usize) {
    let d = GATE_DIM as u64;
    ledger.macs(d * channels as u64, GATE_BITS);
    ledger.macs(4 * d * 2 * d, GATE_BITS);
    ledger.elementwise(4 * d, 0, 1, GATE_BITS); // biases
    ledger.elementwise(5 * d, 4, 1, GATE_BITS); // sigmoid / tanh
    ledger.elementwise(d, 3, 1, GATE_BITS); // cell update and output
    ledger.macs(d, GATE_BITS);
    ledger.elementwise(1, 4, 2, GATE_BITS); // head bias and sigmoid
}

/// Per-channel mean over batch and spatial axes.
pub fn pool_features(x: &Tensor, ledger: &mut EnergyLedger) -> Result<(Vec<f64>, usize)> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::Rank {
            what: "gate input".into(),
            expected: 4,
            shape: shape.to_vec(),
        });
    }
    let (n, c, p) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut f = vec![0.0; c];
    for ni in 0..n {
        for (ci, fc) in f.iter_mut().enumerate() {
            *fc += x.data()[(ni * c + ci) * p..][..p].iter().sum::<f64>();
        }
    }
    let count = n * p;
    for v in &mut f {
        *v /= count as f64;
    }
    ledger.add(crate::energy::OpClass::Add, x.len() as u64, GATE_BITS);
    ledger.add(crate::energy::OpClass::DataMove, x.len() as u64, GATE_BITS);
    ledger.add(crate::energy::OpClass::Multiply, c as u64, GATE_BITS);
    Ok((f, count))
}

/// Runs one gate step on a block input, returning the keep probability, the
/// next recurrent state and the backward cache.
pub fn gate_probability(
    block_input: &Tensor,
    gate: &GateNetwork,
    state: &GateState,
    ledger: &mut EnergyLedger,
) -> Result<(f64, GateState, GateStepCache)> {
    let (features, pooled_count) = pool_features(block_input, ledger)?;
    if features.len() != gate.channels() {
        return Err(Error::config(format!(
            "gate expects {} channels, block input has {}",
            gate.channels(),
            features.len()
        )));
    }
    let d = GATE_DIM;
    let c = features.len();
    let mut z = [0.0; GATE_DIM];
    for (j, zj) in z.iter_mut().enumerate() {
        let row = &gate.proj_w.data()[j * c..(j + 1) * c];
        *zj = gate.proj_b.data()[j] + row.iter().zip(&features).map(|(a, b)| a * b).sum::<f64>();
    }
    let mut a = [0.0; 4 * GATE_DIM];
    for (r, ar) in a.iter_mut().enumerate() {
        let wi = &gate.w_ih.data()[r * d..(r + 1) * d];
        let wh = &gate.w_hh.data()[r * d..(r + 1) * d];
        *ar = gate.b.data()[r]
            + wi.iter().zip(&z).map(|(p, q)| p * q).sum::<f64>()
            + wh.iter().zip(&state.h).map(|(p, q)| p * q).sum::<f64>();
    }
    let mut cache = GateStepCache {
        features,
        z,
        h_prev: state.h,
        c_prev: state.c,
        i: [0.0; GATE_DIM],
        f: [0.0; GATE_DIM],
        g: [0.0; GATE_DIM],
        o: [0.0; GATE_DIM],
        tanh_c: [0.0; GATE_DIM],
        h: [0.0; GATE_DIM],
        prob: 0.0,
        pooled_count,
    };
    let mut next = GateState::default();
    for k in 0..d {
        cache.i[k] = sigmoid(a[k]);
        cache.f[k] = sigmoid(a[d + k]);
        cache.g[k] = a[2 * d + k].tanh();
        cache.o[k] = sigmoid(a[3 * d + k]);
        next.c[k] = cache.f[k] * state.c[k] + cache.i[k] * cache.g[k];
        cache.tanh_c[k] = next.c[k].tanh();
        next.h[k] = cache.o[k] * cache.tanh_c[k];
    }
    cache.h = next.h;
    let logit = gate.head_b.data()[0]
        + gate.head_w.data().iter().zip(&next.h).map(|(a, b)| a * b).sum::<f64>();
    cache.prob = sigmoid(logit);
    charge_cell(ledger, c);
    Ok((cache.prob, next, cache))
}

/// Turns a probability into a decision under `mode`. Ties at the threshold
/// keep the block.
pub fn decide(prob: f64, mode: GateMode, rng: &mut dyn RngCore) -> bool {
    match mode {
        GateMode::Sample => rng.gen::<f64>() < prob,
        GateMode::Deterministic { threshold } => prob >= threshold,
        GateMode::Soft => true,
    }
}

/// One full gate step: probability, decision and next state.
pub fn gate_forward(
    block_input: &Tensor,
    block_index: usize,
    gate: &GateNetwork,
    state: &GateState,
    mode: GateMode,
    rng: &mut dyn RngCore,
    ledger: &mut EnergyLedger,
) -> Result<(GateDecision, GateState, GateStepCache)> {
    let (prob, next, cache) = gate_probability(block_input, gate, state, ledger)?;
    let keep = decide(prob, mode, rng);
    Ok((
        GateDecision {
            prob,
            keep,
            block_index,
        },
        next,
        cache,
    ))
}

/// Gradient carried backward through the recurrent state.
#[derive(Debug, Clone, Copy, Default)]
pub struct GateCarry {
    pub dh: [f64; GATE_DIM],
    pub dc: [f64; GATE_DIM],
}

/// Backpropagates `g_prob` (plus the carry from later steps) through one
/// gate step, accumulating parameter gradients into `grads`. Returns the
/// gradient with respect to the pooled features and the carry for the
/// previous step.
pub fn gate_step_backward(
    cache: &GateStepCache,
    g_prob: f64,
    carry: &GateCarry,
    gate: &GateNetwork,
    grads: &mut GateNetwork,
    ledger: &mut EnergyLedger,
) -> (Vec<f64>, GateCarry) {
    let d = GATE_DIM;
    let c = cache.features.len();
    let g_logit = g_prob * cache.prob * (1.0 - cache.prob);
    grads.head_b.data_mut()[0] += g_logit;
    let mut dh = carry.dh;
    for k in 0..d {
        grads.head_w.data_mut()[k] += g_logit * cache.h[k];
        dh[k] += g_logit * gate.head_w.data()[k];
    }
    let mut da = [0.0; 4 * GATE_DIM];
    let mut prev = GateCarry::default();
    for k in 0..d {
        let d_o = dh[k] * cache.tanh_c[k];
        let dc = dh[k] * cache.o[k] * (1.0 - cache.tanh_c[k] * cache.tanh_c[k]) + carry.dc[k];
        let d_f = dc * cache.c_prev[k];
        let d_i = dc * cache.g[k];
        let d_g = dc * cache.i[k];
        prev.dc[k] = dc * cache.f[k];
        da[k] = d_i * cache.i[k] * (1.0 - cache.i[k]);
        da[d + k] = d_f * cache.f[k] * (1.0 - cache.f[k]);
        da[2 * d + k] = d_g * (1.0 - cache.g[k] * cache.g[k]);
        da[3 * d + k] = d_o * cache.o[k] * (1.0 - cache.o[k]);
    }
    let mut dz = [0.0; GATE_DIM];
    for (r, &dar) in da.iter().enumerate() {
        grads.b.data_mut()[r] += dar;
        for k in 0..d {
            grads.w_ih.data_mut()[r * d + k] += dar * cache.z[k];
            grads.w_hh.data_mut()[r * d + k] += dar * cache.h_prev[k];
            dz[k] += dar * gate.w_ih.data()[r * d + k];
            prev.dh[k] += dar * gate.w_hh.data()[r * d + k];
        }
    }
    let mut g_feat = vec![0.0; c];
    for (j, &dzj) in dz.iter().enumerate() {
        grads.proj_b.data_mut()[j] += dzj;
        for (ci, gf) in g_feat.iter_mut().enumerate() {
            grads.proj_w.data_mut()[j * c + ci] += dzj * cache.features[ci];
            *gf += dzj * gate.proj_w.data()[j * c + ci];
        }
    }
    // backward costs roughly twice the forward cell
    charge_cell(ledger, c);
    charge_cell(ledger, c);
    (g_feat, prev)
}

/// Keep mask from a list of decisions, one per gated block.
pub fn select_layers(decisions: &[GateDecision], num_blocks: usize) -> Result<Vec<bool>> {
    if decisions.len() != num_blocks {
        return Err(Error::config(format!(
            "{} gate decisions for {num_blocks} blocks",
            decisions.len()
        )));
    }
    Ok(decisions.iter().map(|d| d.keep).collect())
}

/// Task loss, complexity cost and their regularized total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SluLossParts {
    pub task_loss: f64,
    pub complexity: f64,
    pub alpha: f64,
    pub total: f64,
}

/// `C = sum(weights_i * block_flops_i) / sum(block_flops_i)`; pass a 0/1
/// mask for the hard cost or keep probabilities for the soft one.
pub fn complexity_cost(weights: &[f64], per_block_flops: &[f64]) -> Result<f64> {
    if weights.len() != per_block_flops.len() {
        return Err(Error::config(format!(
            "{} gate weights for {} blocks",
            weights.len(),
            per_block_flops.len()
        )));
    }
    let total: f64 = per_block_flops.iter().sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    Ok(weights
        .iter()
        .zip(per_block_flops)
        .map(|(w, f)| w * f)
        .sum::<f64>()
        / total)
}

pub fn slu_total_loss(
    task_loss: f64,
    weights: &[f64],
    per_block_flops: &[f64],
    alpha: f64,
) -> Result<SluLossParts> {
    if !(alpha >= 0.0) {
        return Err(Error::config(format!("alpha must be >= 0, got {alpha}")));
    }
    let complexity = complexity_cost(weights, per_block_flops)?;
    Ok(SluLossParts {
        task_loss,
        complexity,
        alpha,
        total: task_loss + alpha * complexity,
    })
}

pub fn mask_weights(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
}

/// Renders a keep mask as a bitstring, e.g. `1010`.
pub fn mask_bits(mask: &[bool]) -> String {
    mask.iter().map(|&k| if k { '1' } else { '0' }).collect()
}
