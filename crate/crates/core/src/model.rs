//! Pre-activation residual network built from the kernels in [`crate::ops`].
//!
//! Layout: a strided stem convolution, `num_blocks` identity-shortcut blocks
//! (`x + m * conv(relu(bn(conv(relu(bn(x))))))`), then batchnorm, ReLU,
//! global average pooling and a dense classifier. Every block can be gated:
//! a skipped block passes its input through untouched and neither computes
//! nor charges anything.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::energy::EnergyLedger;
use crate::error::{Error, Result};
use crate::ops::{self, conv_out_dim, BatchNormCache, ConvGeometry, GradBundle};
use crate::quant::quantize_dynamic;
use crate::slu::{self, GateCarry, GateDecision, GateMode, GateNetwork, GateState, GateStepCache, SluLossParts};
use crate::tensor::Tensor;

/// Static description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerSpec {
    Conv2d {
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Dense {
        din: usize,
        dout: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    GlobalAvgPool,
    ResidualBlock {
        channels: usize,
        k: usize,
    },
}

impl LayerSpec {
    /// Output shape for a given input shape (leading batch axis included).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let want_rank = |r: usize| -> Result<()> {
            if input.len() != r {
                return Err(Error::Rank {
                    what: format!("{self:?} input"),
                    expected: r,
                    shape: input.to_vec(),
                });
            }
            Ok(())
        };
        match *self {
            LayerSpec::Conv2d {
                cin,
                cout,
                k,
                stride,
                pad,
            } => {
                want_rank(4)?;
                if input[1] != cin {
                    return Err(Error::dim("conv input channels (axis 1)", cin, input[1]));
                }
                Ok(vec![
                    input[0],
                    cout,
                    conv_out_dim(input[2], k, stride, pad)?,
                    conv_out_dim(input[3], k, stride, pad)?,
                ])
            }
            LayerSpec::Dense { din, dout } => {
                want_rank(2)?;
                if input[1] != din {
                    return Err(Error::dim("dense input features (axis 1)", din, input[1]));
                }
                Ok(vec![input[0], dout])
            }
            LayerSpec::BatchNorm { channels } => {
                if input.len() < 2 || input[1] != channels {
                    return Err(Error::dim("batchnorm channels (axis 1)", channels, *input.get(1).unwrap_or(&0)));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::GlobalAvgPool => {
                want_rank(4)?;
                Ok(vec![input[0], input[1]])
            }
            LayerSpec::ResidualBlock { channels, k } => {
                want_rank(4)?;
                if input[1] != channels {
                    return Err(Error::dim("residual block channels (axis 1)", channels, input[1]));
                }
                if k % 2 == 0 {
                    return Err(Error::config("residual block kernels must be odd to keep the shape"));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Architecture of the residual network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub input_hw: usize,
    pub width: usize,
    pub num_blocks: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pad: usize,
    pub block_kernel: usize,
    pub num_classes: usize,
    /// Start the second convolution of every block at zero, making each
    /// block an identity map at initialisation.
    #[serde(default)]
    pub zero_init_residual: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            input_hw: 16,
            width: 32,
            num_blocks: 4,
            stem_kernel: 4,
            stem_stride: 4,
            stem_pad: 0,
            block_kernel: 3,
            num_classes: 10,
            zero_init_residual: false,
        }
    }
}

impl NetworkSpec {
    pub fn feature_hw(&self) -> Result<usize> {
        conv_out_dim(self.input_hw, self.stem_kernel, self.stem_stride, self.stem_pad)
    }

    /// The network as a flat layer list.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut v = vec![LayerSpec::Conv2d {
            cin: self.in_channels,
            cout: self.width,
            k: self.stem_kernel,
            stride: self.stem_stride,
            pad: self.stem_pad,
        }];
        for _ in 0..self.num_blocks {
            v.push(LayerSpec::ResidualBlock {
                channels: self.width,
                k: self.block_kernel,
            });
        }
        v.extend([
            LayerSpec::BatchNorm { channels: self.width },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense {
                din: self.width,
                dout: self.num_classes,
            },
        ]);
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.num_classes < 2 || self.in_channels == 0 {
            return Err(Error::config("network needs width >= 1, in_channels >= 1 and >= 2 classes"));
        }
        let mut shape = vec![1, self.in_channels, self.input_hw, self.input_hw];
        for l in self.layers() {
            shape = l.output_shape(&shape)?;
        }
        Ok(())
    }

    fn block_geometry(&self, batch: usize) -> Result<ConvGeometry> {
        let hw = self.feature_hw()?;
        ConvGeometry::new(
            &[batch, self.width, hw, hw],
            &[self.width, self.width, self.block_kernel, self.block_kernel],
            1,
            self.block_kernel / 2,
        )
    }

    /// Forward FLOPs of one executed block at multiplier 1.
    pub fn block_forward_flops(&self, batch: usize) -> Result<u64> {
        let g = self.block_geometry(batch)?;
        let e = (batch * self.width * g.hout * g.wout) as u64;
        Ok(4 * g.macs() + 17 * e)
    }

    /// Forward FLOPs of the stem convolution.
    pub fn stem_forward_flops(&self, batch: usize) -> Result<u64> {
        let g = ConvGeometry::new(
            &[batch, self.in_channels, self.input_hw, self.input_hw],
            &[self.width, self.in_channels, self.stem_kernel, self.stem_kernel],
            self.stem_stride,
            self.stem_pad,
        )?;
        Ok(2 * g.macs())
    }

    /// Forward FLOPs of batchnorm, ReLU, pooling and the classifier.
    pub fn head_forward_flops(&self, batch: usize) -> Result<u64> {
        let hw = self.feature_hw()?;
        let e = (batch * self.width * hw * hw) as u64;
        let fc = (batch * self.width * self.num_classes) as u64;
        let logits = (batch * self.num_classes) as u64;
        Ok(9 * e + 2 * fc + logits)
    }
}

/// Arithmetic precision of a training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Precision {
    /// Width charged for forward arithmetic.
    pub forward_bits: u32,
    /// Width charged for backward arithmetic.
    pub backward_bits: u32,
    /// When set, convolution and dense operands are quantized to these
    /// widths: activations and weights, then output gradients.
    pub fake_quant: Option<(u32, u32)>,
}

impl Precision {
    pub fn full() -> Self {
        Self {
            forward_bits: 32,
            backward_bits: 32,
            fake_quant: None,
        }
    }

    /// Fixed-point training with `act_bits` activations/weights and
    /// `grad_bits` gradients.
    pub fn fixed_point(act_bits: u32, grad_bits: u32) -> Self {
        Self {
            forward_bits: act_bits,
            backward_bits: grad_bits,
            fake_quant: Some((act_bits, grad_bits)),
        }
    }
}

/// The contraction that produces a weight gradient from a layer input and
/// its output gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GradKernel {
    Conv { stride: usize, pad: usize },
    Dense,
}

impl GradKernel {
    pub fn apply(&self, x: &Tensor, g_y: &Tensor, w_shape: &[usize]) -> Result<Tensor> {
        match *self {
            GradKernel::Conv { stride, pad } => ops::conv2d_weight_grad(x, g_y, w_shape, stride, pad),
            GradKernel::Dense => ops::dense_weight_grad(x, g_y),
        }
    }

    /// Multiply-accumulates of one weight-gradient evaluation.
    pub fn macs(&self, x_shape: &[usize], w_shape: &[usize]) -> Result<u64> {
        match *self {
            GradKernel::Conv { stride, pad } => Ok(ConvGeometry::new(x_shape, w_shape, stride, pad)?.macs()),
            GradKernel::Dense => Ok((x_shape[0] * w_shape[0] * w_shape[1]) as u64),
        }
    }
}

/// Interception point for weight-gradient computation.
pub trait WeightGradHook {
    /// Returns the gradient (or a stand-in for it, such as its sign) for a
    /// weight of shape `w_shape` and charges its cost to `ledger`.
    fn weight_grad(
        &mut self,
        layer: &str,
        kernel: GradKernel,
        x: &Tensor,
        g_y: &Tensor,
        w_shape: &[usize],
        ledger: &mut EnergyLedger,
    ) -> Result<Tensor>;
}

/// Exact weight gradients charged at a fixed width.
#[derive(Debug, Clone, Copy)]
pub struct ExactGrad {
    pub bits: u32,
}

impl WeightGradHook for ExactGrad {
    fn weight_grad(
        &mut self,
        _layer: &str,
        kernel: GradKernel,
        x: &Tensor,
        g_y: &Tensor,
        w_shape: &[usize],
        ledger: &mut EnergyLedger,
    ) -> Result<Tensor> {
        ledger.macs(kernel.macs(x.shape(), w_shape)?, self.bits);
        kernel.apply(x, g_y, w_shape)
    }
}

/// Per-call settings shared by every layer in a pass.
#[derive(Debug, Clone, Copy)]
pub struct PassConfig {
    pub precision: Precision,
    pub train: bool,
    /// Whether training-mode batchnorm updates its running statistics.
    pub update_stats: bool,
}

impl PassConfig {
    pub fn train(precision: Precision) -> Self {
        Self {
            precision,
            train: true,
            update_stats: true,
        }
    }

    pub fn eval() -> Self {
        Self {
            precision: Precision::full(),
            train: false,
            update_stats: false,
        }
    }
}

fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn maybe_quantize(x: &Tensor, bits: Option<u32>) -> Result<Tensor> {
    match bits {
        Some(b) => Ok(quantize_dynamic(x, b)?.values),
        None => {
            x.ensure_finite("layer operand")?;
            Ok(x.clone())
        }
    }
}

#[derive(Debug, Clone)]
struct OperandCache {
    x: Tensor,
    w: Tensor,
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: Tensor,
    pub stride: usize,
    pub pad: usize,
    cache: Option<OperandCache>,
}

impl Conv2dLayer {
    pub fn new(w: Tensor, stride: usize, pad: usize) -> Self {
        Self {
            w,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, cfg: PassConfig, ledger: &mut EnergyLedger) -> Result<Tensor> {
        let act_bits = cfg.precision.fake_quant.map(|q| q.0);
        let xq = maybe_quantize(x, act_bits)?;
        let wq = maybe_quantize(&self.w, act_bits)?;
        let y = ops::conv2d_forward(&xq, &wq, self.stride, self.pad, ledger, cfg.precision.forward_bits)?;
        self.cache = cfg.train.then_some(OperandCache { x: xq, w: wq });
        Ok(y)
    }

    /// Returns `(g_x, g_w)`; `g_x` is skipped (`None`) when not needed.
    pub fn backward(
        &mut self,
        g_y: &Tensor,
        name: &str,
        need_input_grad: bool,
        cfg: PassConfig,
        ledger: &mut EnergyLedger,
        hook: &mut dyn WeightGradHook,
    ) -> Result<(Option<Tensor>, Tensor)> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State(format!("{name}: backward without cached forward activations")))?;
        let gq = maybe_quantize(g_y, cfg.precision.fake_quant.map(|q| q.1))?;
        let g_x = if need_input_grad {
            let g = ConvGeometry::new(cache.x.shape(), cache.w.shape(), self.stride, self.pad)?;
            ledger.macs(g.macs(), cfg.precision.backward_bits);
            Some(ops::conv2d_input_grad(&gq, &cache.w, cache.x.shape(), self.stride, self.pad)?)
        } else {
            None
        };
        let kernel = GradKernel::Conv {
            stride: self.stride,
            pad: self.pad,
        };
        let g_w = hook.weight_grad(name, kernel, &cache.x, &gq, self.w.shape(), ledger)?;
        Ok((g_x, g_w))
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
    cache: Option<OperandCache>,
}

impl DenseLayer {
    pub fn new(w: Tensor, b: Tensor) -> Self {
        Self { w, b, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor, cfg: PassConfig, ledger: &mut EnergyLedger) -> Result<Tensor> {
        let act_bits = cfg.precision.fake_quant.map(|q| q.0);
        let xq = maybe_quantize(x, act_bits)?;
        let wq = maybe_quantize(&self.w, act_bits)?;
        let y = ops::dense_forward(&xq, &wq, Some(&self.b), ledger, cfg.precision.forward_bits)?;
        self.cache = cfg.train.then_some(OperandCache { x: xq, w: wq });
        Ok(y)
    }

    /// Returns `(g_x, [g_w, g_b])`.
    pub fn backward(
        &mut self,
        g_y: &Tensor,
        name: &str,
        cfg: PassConfig,
        ledger: &mut EnergyLedger,
        hook: &mut dyn WeightGradHook,
    ) -> Result<GradBundle> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State(format!("{name}: backward without cached forward activations")))?;
        let gq = maybe_quantize(g_y, cfg.precision.fake_quant.map(|q| q.1))?;
        let bits = cfg.precision.backward_bits;
        let g_x = ops::dense_input_grad(&gq, &cache.w)?;
        ledger.macs(GradKernel::Dense.macs(cache.x.shape(), cache.w.shape())?, bits);
        let g_w = hook.weight_grad(name, GradKernel::Dense, &cache.x, &gq, self.w.shape(), ledger)?;
        let g_b = ops::dense_bias_grad(&gq);
        ledger.elementwise(gq.len() as u64, 0, 1, bits);
        Ok(GradBundle {
            g_x,
            g_w: vec![g_w, g_b],
        })
    }
}

/// Random source for gating modes that never draw.
pub(crate) struct NoDraws;

impl RngCore for NoDraws {
    fn next_u32(&mut self) -> u32 {
        unreachable!("this gating mode draws no random numbers")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("this gating mode draws no random numbers")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("this gating mode draws no random numbers")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("this gating mode draws no random numbers")
    }
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    /// Batches seen since running statistics switched to a plain average.
    averaged: Option<usize>,
    cache: Option<BatchNormCache>,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            averaged: None,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, cfg: PassConfig, ledger: &mut EnergyLedger) -> Result<Tensor> {
        if !cfg.train {
            return ops::batchnorm_forward_eval(
                x,
                &self.gamma,
                &self.beta,
                &self.running_mean,
                &self.running_var,
                self.eps,
            );
        }
        let (y, cache) =
            ops::batchnorm_forward_train(x, &self.gamma, &self.beta, self.eps, ledger, cfg.precision.forward_bits)?;
        if cfg.update_stats {
            let m = match self.averaged.as_mut() {
                Some(k) => {
                    *k += 1;
                    (*k - 1) as f64 / *k as f64
                }
                None => self.momentum,
            };
            for (r, b) in self.running_mean.iter_mut().zip(&cache.mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in self.running_var.iter_mut().zip(&cache.var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
        self.cache = Some(cache);
        Ok(y)
    }

    /// Returns `(g_x, [g_gamma, g_beta])`.
    pub fn backward(&mut self, g_y: &Tensor, name: &str, cfg: PassConfig, ledger: &mut EnergyLedger) -> Result<GradBundle> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State(format!("{name}: backward without cached forward activations")))?;
        ops::batchnorm_backward(&cache, &self.gamma, g_y, ledger, cfg.precision.backward_bits)
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    u1: Tensor,
    u2: Tensor,
    f: Tensor,
    m: f64,
}

/// Gradients of one executed residual block.
#[derive(Debug, Clone)]
pub struct BlockBackward {
    pub g_x: Tensor,
    /// Derivative of the loss with respect to the block multiplier.
    pub g_m: f64,
    /// `[bn1.gamma, bn1.beta, conv1.w, bn2.gamma, bn2.beta, conv2.w]`.
    pub grads: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub bn1: BatchNormLayer,
    pub conv1: Conv2dLayer,
    pub bn2: BatchNormLayer,
    pub conv2: Conv2dLayer,
    cache: Option<BlockCache>,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(channels: usize, k: usize, zero_last: bool, rng: &mut R) -> Self {
        let fan_in = channels * k * k;
        let shape = [channels, channels, k, k];
        let w2 = if zero_last {
            Tensor::zeros(&shape)
        } else {
            he_normal(&shape, fan_in, rng)
        };
        Self {
            bn1: BatchNormLayer::new(channels),
            conv1: Conv2dLayer::new(he_normal(&shape, fan_in, rng), 1, k / 2),
            bn2: BatchNormLayer::new(channels),
            conv2: Conv2dLayer::new(w2, 1, k / 2),
            cache: None,
        }
    }

    /// `None` skips the block: the input is returned unchanged, nothing is
    /// charged and the block holds no backward state.
    pub fn forward(
        &mut self,
        x: &Tensor,
        multiplier: Option<f64>,
        cfg: PassConfig,
        ledger: &mut EnergyLedger,
    ) -> Result<Tensor> {
        let Some(m) = multiplier else {
            self.cache = None;
            return Ok(x.clone());
        };
        let bits = cfg.precision.forward_bits;
        let u1 = self.bn1.forward(x, cfg, ledger)?;
        let r1 = ops::relu_forward(&u1, ledger, bits);
        let c1 = self.conv1.forward(&r1, cfg, ledger)?;
        let u2 = self.bn2.forward(&c1, cfg, ledger)?;
        let r2 = ops::relu_forward(&u2, ledger, bits);
        let f = self.conv2.forward(&r2, cfg, ledger)?;
        let out = if m == 1.0 {
            ledger.elementwise(x.len() as u64, 0, 1, bits);
            x.add(&f)?
        } else {
            ledger.elementwise(x.len() as u64, 1, 1, bits);
            x.zip_map(&f, |a, b| a + m * b)?
        };
        if cfg.train {
            self.cache = Some(BlockCache { u1, u2, f, m });
        }
        Ok(out)
    }

    pub fn backward(
        &mut self,
        g_out: &Tensor,
        name: &str,
        cfg: PassConfig,
        ledger: &mut EnergyLedger,
        hook: &mut dyn WeightGradHook,
    ) -> Result<BlockBackward> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State(format!("{name}: backward without cached forward activations")))?;
        let bits = cfg.precision.backward_bits;
        let g_m = g_out.dot(&cache.f)?;
        let g_f = if cache.m == 1.0 {
            g_out.clone()
        } else {
            g_out.scale(cache.m)
        };
        ledger.elementwise(g_out.len() as u64, 2, 1, bits);
        let (g_r2, g_w2) = self
            .conv2
            .backward(&g_f, &format!("{name}.conv2"), true, cfg, ledger, hook)?;
        let g_u2 = ops::relu_backward(&cache.u2, &g_r2.expect("input grad requested"), ledger, bits)?;
        let bn2 = self.bn2.backward(&g_u2, &format!("{name}.bn2"), cfg, ledger)?;
        let (g_r1, g_w1) = self
            .conv1
            .backward(&bn2.g_x, &format!("{name}.conv1"), true, cfg, ledger, hook)?;
        let g_u1 = ops::relu_backward(&cache.u1, &g_r1.expect("input grad requested"), ledger, bits)?;
        let bn1 = self.bn1.backward(&g_u1, &format!("{name}.bn1"), cfg, ledger)?;
        let mut g_x = bn1.g_x;
        g_x.add_assign(g_out)?;
        ledger.elementwise(g_out.len() as u64, 0, 1, bits);
        let [g1, b1]: [Tensor; 2] = bn1.g_w.try_into().expect("gamma and beta");
        let [g2, b2]: [Tensor; 2] = bn2.g_w.try_into().expect("gamma and beta");
        Ok(BlockBackward {
            g_x,
            g_m,
            grads: vec![g1, b1, g_w1, g2, b2, g_w2],
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.bn1.gamma,
            &self.bn1.beta,
            &self.conv1.w,
            &self.bn2.gamma,
            &self.bn2.beta,
            &self.conv2.w,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv1.w,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
            &mut self.conv2.w,
        ]
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Stem,
    Block(usize),
    Head,
}

/// How residual blocks are selected during a pass.
pub enum Gating<'a> {
    /// Every block runs at multiplier 1.
    AllKeep,
    /// A fixed keep mask, one entry per block.
    Fixed(&'a [bool]),
    /// The shared recurrent gate decides per block.
    Learned {
        gate: &'a GateNetwork,
        mode: GateMode,
        rng: &'a mut dyn RngCore,
    },
}

/// Forward results that the backward pass and the caller need.
pub struct ForwardOutput {
    pub logits: Tensor,
    pub decisions: Vec<GateDecision>,
    pub multipliers: Vec<Option<f64>>,
    pub gate_caches: Vec<GateStepCache>,
    /// Cost of running the gates, kept apart from the base model.
    pub gate_ledger: EnergyLedger,
}

impl ForwardOutput {
    pub fn mask(&self) -> Vec<bool> {
        self.multipliers.iter().map(Option::is_some).collect()
    }
}

/// Everything one training step produces.
pub struct StepOutput {
    pub loss: SluLossParts,
    pub logits: Tensor,
    pub decisions: Vec<GateDecision>,
    pub mask: Vec<bool>,
    /// One entry per network parameter; `None` for parameters of skipped
    /// blocks, which must not be updated.
    pub param_grads: Vec<Option<Tensor>>,
    pub gate_grads: Option<GateNetwork>,
    pub gate_ledger: EnergyLedger,
}

#[derive(Debug, Clone)]
struct HeadCache {
    u: Tensor,
    pooled_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub stem: Conv2dLayer,
    pub blocks: Vec<ResidualBlock>,
    pub head_bn: BatchNormLayer,
    pub fc: DenseLayer,
    head_cache: Option<HeadCache>,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let k = spec.stem_kernel;
        let stem = Conv2dLayer::new(
            he_normal(&[spec.width, spec.in_channels, k, k], spec.in_channels * k * k, rng),
            spec.stem_stride,
            spec.stem_pad,
        );
        let blocks = (0..spec.num_blocks)
            .map(|_| ResidualBlock::new(spec.width, spec.block_kernel, spec.zero_init_residual, rng))
            .collect();
        let fc = DenseLayer::new(
            he_normal(&[spec.num_classes, spec.width], spec.width, rng),
            Tensor::zeros(&[spec.num_classes]),
        );
        Ok(Self {
            spec: spec.clone(),
            stem,
            blocks,
            head_bn: BatchNormLayer::new(spec.width),
            fc,
            head_cache: None,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.stem.w];
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend([&self.head_bn.gamma, &self.head_bn.beta, &self.fc.w, &self.fc.b]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.stem.w];
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend([
            &mut self.head_bn.gamma,
            &mut self.head_bn.beta,
            &mut self.fc.w,
            &mut self.fc.b,
        ]);
        v
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut v = vec![ParamGroup::Stem];
        for i in 0..self.blocks.len() {
            v.extend(std::iter::repeat_n(ParamGroup::Block(i), 6));
        }
        v.extend([ParamGroup::Head; 4]);
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = vec!["stem.w".to_string()];
        for i in 0..self.blocks.len() {
            for p in ["bn1.gamma", "bn1.beta", "conv1.w", "bn2.gamma", "bn2.beta", "conv2.w"] {
                v.push(format!("block{i}.{p}"));
            }
        }
        v.extend(["head_bn.gamma", "head_bn.beta", "fc.w", "fc.b"].map(String::from));
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Batchnorm running statistics, flattened in layer order.
    pub fn running_stats(&self) -> Vec<f64> {
        let mut v = Vec::new();
        let mut push = |bn: &BatchNormLayer| {
            v.extend_from_slice(&bn.running_mean);
            v.extend_from_slice(&bn.running_var);
        };
        for b in &self.blocks {
            push(&b.bn1);
            push(&b.bn2);
        }
        push(&self.head_bn);
        v
    }

    pub fn set_running_stats(&mut self, stats: &[f64]) -> Result<()> {
        let mut layers: Vec<&mut BatchNormLayer> = Vec::new();
        for b in &mut self.blocks {
            layers.push(&mut b.bn1);
            layers.push(&mut b.bn2);
        }
        layers.push(&mut self.head_bn);
        let total: usize = layers.iter().map(|l| 2 * l.running_mean.len()).sum();
        if total != stats.len() {
            return Err(Error::dim("running statistics", total, stats.len()));
        }
        let mut off = 0;
        for l in layers {
            let c = l.running_mean.len();
            l.running_mean.copy_from_slice(&stats[off..off + c]);
            l.running_var.copy_from_slice(&stats[off + c..off + 2 * c]);
            off += 2 * c;
        }
        Ok(())
    }

    fn batchnorms_mut(&mut self) -> Vec<&mut BatchNormLayer> {
        let mut v: Vec<&mut BatchNormLayer> = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.bn1);
            v.push(&mut b.bn2);
        }
        v.push(&mut self.head_bn);
        v
    }

    /// Replaces the batchnorm running statistics with plain averages of
    /// batch statistics over `batches`, run under `gating` at full
    /// precision. With a gate, blocks follow its thresholded decisions.
    /// Layers a batch skips keep averaging over the rest; layers no batch
    /// reaches keep their old values. Forward cost is charged.
    pub fn recalibrate_batchnorm(
        &mut self,
        batches: &[Tensor],
        gate: Option<(&GateNetwork, f64)>,
        ledger: &mut EnergyLedger,
    ) -> Result<()> {
        for bn in self.batchnorms_mut() {
            bn.averaged = Some(0);
        }
        let cfg = PassConfig::train(Precision::full());
        let mut res = Ok(());
        let mut unused = NoDraws;
        for x in batches {
            let gating = match gate {
                Some((g, threshold)) => Gating::Learned {
                    gate: g,
                    mode: GateMode::Deterministic { threshold },
                    rng: &mut unused,
                },
                None => Gating::AllKeep,
            };
            if let Err(e) = self.forward(x, gating, cfg, ledger) {
                res = Err(e);
                break;
            }
        }
        for bn in self.batchnorms_mut() {
            bn.averaged = None;
            bn.cache = None;
        }
        res
    }

    pub fn per_block_flops(&self, batch: usize) -> Result<Vec<f64>> {
        let f = self.spec.block_forward_flops(batch)? as f64;
        Ok(vec![f; self.blocks.len()])
    }

    /// Runs the network; with `cfg.train` the layers cache what the
    /// backward pass needs.
    pub fn forward(
        &mut self,
        x: &Tensor,
        gating: Gating<'_>,
        cfg: PassConfig,
        ledger: &mut EnergyLedger,
    ) -> Result<ForwardOutput> {
        let spec = &self.spec;
        x.expect_shape(
            "network input",
            &[x.shape().first().copied().unwrap_or(0), spec.in_channels, spec.input_hw, spec.input_hw],
        )?;
        let nb = self.blocks.len();
        if let Gating::Fixed(mask) = &gating {
            if mask.len() != nb {
                return Err(Error::config(format!("keep mask has {} entries for {nb} blocks", mask.len())));
            }
        }
        let bits = cfg.precision.forward_bits;
        let mut h = self.stem.forward(x, cfg, ledger)?;
        let mut out = ForwardOutput {
            logits: Tensor::scalar(0.0),
            decisions: Vec::with_capacity(nb),
            multipliers: Vec::with_capacity(nb),
            gate_caches: Vec::new(),
            gate_ledger: EnergyLedger::new(),
        };
        let mut gating = gating;
        let mut state = GateState::default();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let multiplier = match &mut gating {
                Gating::AllKeep => Some(1.0),
                Gating::Fixed(mask) => mask[i].then_some(1.0),
                Gating::Learned { gate, mode, rng } => {
                    let (d, next, cache) =
                        slu::gate_forward(&h, i, gate, &state, *mode, &mut **rng, &mut out.gate_ledger)?;
                    state = next;
                    out.decisions.push(d);
                    out.gate_caches.push(cache);
                    match mode {
                        GateMode::Soft => Some(d.prob),
                        _ => d.keep.then_some(1.0),
                    }
                }
            };
            if !matches!(gating, Gating::Learned { .. }) {
                out.decisions.push(GateDecision {
                    prob: if multiplier.is_some() { 1.0 } else { 0.0 },
                    keep: multiplier.is_some(),
                    block_index: i,
                });
            }
            h = block.forward(&h, multiplier, cfg, ledger)?;
            out.multipliers.push(multiplier);
        }
        let u = self.head_bn.forward(&h, cfg, ledger)?;
        let r = ops::relu_forward(&u, ledger, bits);
        let pooled = ops::global_avg_pool_forward(&r, ledger, bits)?;
        out.logits = self.fc.forward(&pooled, cfg, ledger)?;
        if cfg.train {
            self.head_cache = Some(HeadCache {
                u,
                pooled_shape: r.shape().to_vec(),
            });
        }
        out.logits.ensure_finite("logits")?;
        Ok(out)
    }

    /// Forward, loss and backward for one mini-batch. The loss is the task
    /// cross-entropy plus `alpha` times the soft complexity cost of the
    /// gate probabilities.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        gating: Gating<'_>,
        alpha: f64,
        cfg: PassConfig,
        ledger: &mut EnergyLedger,
        hook: &mut dyn WeightGradHook,
    ) -> Result<StepOutput> {
        let cfg = PassConfig { train: true, ..cfg };
        let gate = match &gating {
            Gating::Learned { gate, .. } => Some(*gate),
            _ => None,
        };
        let mut fwd = self.forward(x, gating, cfg, ledger)?;
        let mut gate_ledger = std::mem::take(&mut fwd.gate_ledger);
        let bits = cfg.precision.backward_bits;
        let (task_loss, g_logits) = ops::softmax_cross_entropy(&fwd.logits, labels, ledger, cfg.precision.forward_bits)?;
        let block_flops = self.per_block_flops(x.shape()[0])?;
        let probs: Vec<f64> = fwd.decisions.iter().map(|d| d.prob).collect();
        let loss = slu::slu_total_loss(task_loss, &probs, &block_flops, alpha)?;
        let total_flops: f64 = block_flops.iter().sum();
        let mask = fwd.mask();

        let n_params = self.params().len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n_params];
        let head_cache = self
            .head_cache
            .take()
            .ok_or_else(|| Error::State("head: backward without cached forward activations".into()))?;
        let fc = self.fc.backward(&g_logits, "fc", cfg, ledger, hook)?;
        let [g_fc_w, g_fc_b]: [Tensor; 2] = fc.g_w.try_into().expect("weight and bias");
        grads[n_params - 2] = Some(g_fc_w);
        grads[n_params - 1] = Some(g_fc_b);
        let g_r = ops::global_avg_pool_backward(&head_cache.pooled_shape, &fc.g_x, ledger, bits)?;
        let g_u = ops::relu_backward(&head_cache.u, &g_r, ledger, bits)?;
        let hb = self.head_bn.backward(&g_u, "head_bn", cfg, ledger)?;
        let [g_hg, g_hb]: [Tensor; 2] = hb.g_w.try_into().expect("gamma and beta");
        grads[n_params - 4] = Some(g_hg);
        grads[n_params - 3] = Some(g_hb);

        let mut g = hb.g_x;
        let mut gate_grads = gate.map(GateNetwork::zeros_like);
        let mut carry = GateCarry::default();
        for i in (0..self.blocks.len()).rev() {
            let name = format!("block{i}");
            let mut g_m = 0.0;
            if fwd.multipliers[i].is_some() {
                let bb = self.blocks[i].backward(&g, &name, cfg, ledger, hook)?;
                g_m = bb.g_m;
                for (j, t) in bb.grads.into_iter().enumerate() {
                    grads[1 + 6 * i + j] = Some(t);
                }
                g = bb.g_x;
            }
            if let (Some(gate), Some(gg)) = (gate, gate_grads.as_mut()) {
                let share = if total_flops > 0.0 { block_flops[i] / total_flops } else { 0.0 };
                let g_prob = g_m + alpha * share;
                let cache = &fwd.gate_caches[i];
                let (g_feat, prev) = slu::gate_step_backward(cache, g_prob, &carry, gate, gg, &mut gate_ledger);
                carry = prev;
                let count = cache.pooled_count as f64;
                let (n, c, p) = (g.shape()[0], g.shape()[1], g.shape()[2] * g.shape()[3]);
                let data = g.data_mut();
                for ni in 0..n {
                    for (ci, gf) in g_feat.iter().enumerate() {
                        let add = gf / count;
                        for v in &mut data[(ni * c + ci) * p..][..p] {
                            *v += add;
                        }
                    }
                }
                gate_ledger.elementwise(g.len() as u64, 0, 1, 32);
            }
        }
        let (_, g_stem) = self.stem.backward(&g, "stem", false, cfg, ledger, hook)?;
        grads[0] = Some(g_stem);
        for t in grads.iter().flatten() {
            t.ensure_finite("parameter gradient")?;
        }
        Ok(StepOutput {
            loss,
            logits: fwd.logits,
            decisions: fwd.decisions,
            mask,
            param_grads: grads,
            gate_grads,
            gate_ledger,
        })
    }

    /// Inference-mode logits at full precision, without charging anything.
    pub fn predict(&mut self, x: &Tensor, gating: Gating<'_>) -> Result<(Tensor, Vec<bool>)> {
        let mut scratch = EnergyLedger::new();
        let out = self.forward(x, gating, PassConfig::eval(), &mut scratch)?;
        let mask = out.mask();
        Ok((out.logits, mask))
    }
}

/// Index of the largest logit in each row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
