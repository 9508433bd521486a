//! Layer-graph assembly and the three forward modes: deterministic search,
//! stochastic search, and fixed-plan retraining/evaluation.
//!
//! Each quantized convolution owns exactly one meta weight tensor plus its
//! clipping parameter alpha and the two strength vectors. Quantization of the
//! incoming activations belongs to the consuming convolution, so activation
//! quantization applies to the ReLU output entering the next quantized conv.

use std::cell::RefCell;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costmodel::LayerCost;
use crate::dataio::{augment_batch, Batch, Dataset};
use crate::error::{Error, Result};
use crate::ops::{self, BnBuffers};
use crate::optim::{adam_step, cosine_lr, sgd_momentum_step, Param};
use crate::quantizer::{QuantTrace, ALPHA_INIT, ALPHA_MIN};
use crate::search::{BitwidthSet, BranchCoeffs, NetworkPlan};
use crate::rng::Rng;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// layer specs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputRef {
    Prev,
    Node(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        in_c: usize,
        out_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        quantize: bool,
    },
    Dense {
        in_f: usize,
        out_f: usize,
        quantize: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    GlobalAvgPool,
    /// Adds the output of an earlier node to the previous layer's output.
    ResidualAdd {
        other: usize,
    },
}

#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input: InputRef,
}

#[derive(Debug, Clone)]
pub struct QuantParams {
    pub alpha: Param,
    pub r: Param,
    pub s: Param,
}

#[derive(Debug, Clone)]
pub enum LayerParams {
    Conv { weight: Param, quant: Option<QuantParams> },
    Dense { weight: Param, bias: Param },
    BatchNorm { gamma: Param, beta: Param, buffers: BnBuffers },
    None,
}

#[derive(Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: LayerParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NetMode {
    #[serde(rename = "search-det")]
    SearchDet,
    #[serde(rename = "search-sto")]
    SearchSto,
    #[serde(rename = "fixed")]
    Fixed(NetworkPlan),
}

#[derive(Clone)]
pub struct MixedPrecNet {
    pub arch: String,
    pub num_classes: usize,
    pub input_hw: usize,
    pub mode: NetMode,
    bits: BitwidthSet,
    layers: Vec<Layer>,
}

// ---------------------------------------------------------------------------
// forward configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnStatsMode {
    /// Batch statistics, running buffers updated (weight-update passes).
    TrainUpdate,
    /// Batch statistics, running buffers untouched (strength-update passes).
    TrainFrozen,
    /// Running statistics (evaluation).
    Eval,
}

#[derive(Clone)]
pub enum CoeffSource<'a> {
    /// Softmax(strength) branch coefficients.
    Deterministic,
    /// Gumbel-Softmax coefficients with fresh noise per forward pass.
    Stochastic { tau: f64 },
    /// Gumbel-Softmax with caller-provided noise, one (w, x) pair per
    /// quantized layer; used by gradient checks.
    FrozenStochastic {
        tau: f64,
        noise: &'a [(Vec<f64>, Vec<f64>)],
    },
    /// Fixed-plan quantization (retraining / evaluation).
    Fixed(&'a NetworkPlan),
    /// No quantization anywhere (full-precision reference).
    Float,
}

pub struct ForwardCfg<'a> {
    pub coeffs: CoeffSource<'a>,
    pub bn: BnStatsMode,
    pub trace: Option<&'a RefCell<QuantTrace>>,
}

impl<'a> ForwardCfg<'a> {
    pub fn eval(coeffs: CoeffSource<'a>) -> Self {
        Self { coeffs, bn: BnStatsMode::Eval, trace: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamField {
    ConvWeight,
    DenseWeight,
    DenseBias,
    BnGamma,
    BnBeta,
    Alpha,
    StrengthR,
    StrengthS,
}

pub struct ForwardPass {
    pub tape: Tape,
    pub logits: VarId,
    pub bindings: Vec<(usize, ParamField, VarId)>,
    /// Quantized-activation node per quantized layer, for grid spot checks.
    pub quant_act_nodes: Vec<(usize, VarId)>,
}

// ---------------------------------------------------------------------------
// builders
// ---------------------------------------------------------------------------

struct Builder {
    layers: Vec<Layer>,
    rng: Rng,
    strength_len: usize,
}

impl Builder {
    fn new(seed: u64, strength_len: usize) -> Self {
        Self { layers: Vec::new(), rng: Rng::new(seed), strength_len }
    }

    fn push(&mut self, kind: LayerKind, input: InputRef) -> usize {
        let params = match &kind {
            LayerKind::Conv { in_c, out_c, kh, kw, quantize, .. } => {
                let fan_in = in_c * kh * kw;
                let std = (2.0 / fan_in as f64).sqrt();
                let weight = Param::new(Tensor::randn(&[*out_c, *in_c, *kh, *kw], std, &mut self.rng));
                let quant = quantize.then(|| QuantParams {
                    alpha: Param::new(Tensor::scalar(ALPHA_INIT)),
                    r: Param::new(Tensor::zeros(&[self.strength_len])),
                    s: Param::new(Tensor::zeros(&[self.strength_len])),
                });
                LayerParams::Conv { weight, quant }
            }
            LayerKind::Dense { in_f, out_f, .. } => {
                let std = (1.0 / *in_f as f64).sqrt();
                LayerParams::Dense {
                    weight: Param::new(Tensor::randn(&[*out_f, *in_f], std, &mut self.rng)),
                    bias: Param::new(Tensor::zeros(&[*out_f])),
                }
            }
            LayerKind::BatchNorm { channels } => LayerParams::BatchNorm {
                gamma: Param::new(Tensor::full(&[*channels], 1.0)),
                beta: Param::new(Tensor::zeros(&[*channels])),
                buffers: BnBuffers::new(*channels),
            },
            _ => LayerParams::None,
        };
        self.layers.push(Layer { spec: LayerSpec { kind, input }, params });
        self.layers.len() - 1
    }

    fn conv_bn_relu(&mut self, in_c: usize, out_c: usize, stride: usize, quantize: bool, input: InputRef) -> usize {
        self.push(
            LayerKind::Conv { in_c, out_c, kh: 3, kw: 3, stride, pad: 1, quantize },
            input,
        );
        self.push(LayerKind::BatchNorm { channels: out_c }, InputRef::Prev);
        self.push(LayerKind::Relu, InputRef::Prev)
    }
}

/// Small search vehicle: an unquantized stem conv, three quantized conv
/// blocks (8 -> 16 -> 32 channels, one stride-2 downsampling), global average
/// pooling and an unquantized classifier.
pub fn build_tinynet(num_classes: usize, bits: BitwidthSet, seed: u64) -> Result<MixedPrecNet> {
    if num_classes < 2 {
        return Err(Error::InvalidArg("need at least 2 classes".to_string()));
    }
    let mut b = Builder::new(seed, bits.len());
    b.conv_bn_relu(3, 8, 1, false, InputRef::Prev);
    b.conv_bn_relu(8, 16, 1, true, InputRef::Prev);
    b.conv_bn_relu(16, 32, 2, true, InputRef::Prev);
    b.conv_bn_relu(32, 32, 1, true, InputRef::Prev);
    b.push(LayerKind::GlobalAvgPool, InputRef::Prev);
    b.push(
        LayerKind::Dense { in_f: 32, out_f: num_classes, quantize: false },
        InputRef::Prev,
    );
    Ok(MixedPrecNet {
        arch: "tinynet".to_string(),
        num_classes,
        input_hw: 16,
        mode: NetMode::SearchDet,
        bits,
        layers: b.layers,
    })
}

/// Standard CIFAR ResNet-20: three stages of three basic blocks at widths
/// 16/32/64, identity or 1x1-conv shortcuts, first conv and final dense kept
/// full precision, downsampling shortcuts quantized like other convs.
pub fn build_resnet20(num_classes: usize, bits: BitwidthSet, seed: u64) -> Result<MixedPrecNet> {
    let mut b = Builder::new(seed, bits.len());
    let mut cursor = b.conv_bn_relu(3, 16, 1, false, InputRef::Prev);
    let widths = [16usize, 32, 64];
    let mut in_c = 16;
    for (stage, &out_c) in widths.iter().enumerate() {
        for block in 0..3 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let entry = cursor;
            b.push(
                LayerKind::Conv { in_c, out_c, kh: 3, kw: 3, stride, pad: 1, quantize: true },
                InputRef::Node(entry),
            );
            b.push(LayerKind::BatchNorm { channels: out_c }, InputRef::Prev);
            b.push(LayerKind::Relu, InputRef::Prev);
            b.push(
                LayerKind::Conv { in_c: out_c, out_c, kh: 3, kw: 3, stride: 1, pad: 1, quantize: true },
                InputRef::Prev,
            );
            let main = b.push(LayerKind::BatchNorm { channels: out_c }, InputRef::Prev);
            let shortcut = if stride != 1 || in_c != out_c {
                b.push(
                    LayerKind::Conv { in_c, out_c, kh: 1, kw: 1, stride, pad: 0, quantize: true },
                    InputRef::Node(entry),
                );
                b.push(LayerKind::BatchNorm { channels: out_c }, InputRef::Prev)
            } else {
                entry
            };
            let _ = main;
            b.push(LayerKind::ResidualAdd { other: shortcut }, InputRef::Node(main));
            cursor = b.push(LayerKind::Relu, InputRef::Prev);
            in_c = out_c;
        }
    }
    b.push(LayerKind::GlobalAvgPool, InputRef::Prev);
    b.push(
        LayerKind::Dense { in_f: 64, out_f: num_classes, quantize: false },
        InputRef::Prev,
    );
    Ok(MixedPrecNet {
        arch: "resnet20".to_string(),
        num_classes,
        input_hw: 32,
        mode: NetMode::SearchDet,
        bits,
        layers: b.layers,
    })
}

pub fn build_arch(arch: &str, num_classes: usize, bits: BitwidthSet, seed: u64) -> Result<MixedPrecNet> {
    match arch {
        "tinynet" => build_tinynet(num_classes, bits, seed),
        "resnet20" => build_resnet20(num_classes, bits, seed),
        other => Err(Error::Config(format!("unknown architecture '{other}'"))),
    }
}

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

impl MixedPrecNet {
    pub fn bits(&self) -> &BitwidthSet {
        &self.bits
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn quantized_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.spec.kind, LayerKind::Conv { quantize: true, .. }))
            .count()
    }

    /// Stored meta weight tensor count for each quantized layer. One per
    /// layer by construction, independent of the candidate-set size.
    pub fn meta_weight_tensors_per_quantized_layer(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match (&l.spec.kind, &l.params) {
                (LayerKind::Conv { quantize: true, .. }, LayerParams::Conv { .. }) => Some(1),
                _ => None,
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        for layer in &self.layers {
            match &layer.params {
                LayerParams::Conv { weight, .. } => total += weight.value.numel(),
                LayerParams::Dense { weight, bias } => total += weight.value.numel() + bias.value.numel(),
                LayerParams::BatchNorm { gamma, beta, .. } => total += gamma.value.numel() + beta.value.numel(),
                LayerParams::None => {}
            }
        }
        total
    }

    /// (r, s) strength values per quantized layer, in layer order.
    pub fn strengths(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.layers
            .iter()
            .filter_map(|l| match &l.params {
                LayerParams::Conv { quant: Some(q), .. } => {
                    Some((q.r.value.data().to_vec(), q.s.value.data().to_vec()))
                }
                _ => None,
            })
            .collect()
    }

    pub fn set_strengths(&mut self, strengths: &[(Vec<f64>, Vec<f64>)]) -> Result<()> {
        let mut it = strengths.iter();
        for layer in &mut self.layers {
            if let LayerParams::Conv { quant: Some(q), .. } = &mut layer.params {
                let (r, s) = it
                    .next()
                    .ok_or_else(|| Error::InvalidArg("too few strength pairs".to_string()))?;
                q.r.value = Tensor::new(vec![r.len()], r.clone())?;
                q.s.value = Tensor::new(vec![s.len()], s.clone())?;
            }
        }
        Ok(())
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter_map(|l| match &l.params {
                LayerParams::Conv { quant: Some(q), .. } => Some(q.alpha.value.item()),
                _ => None,
            })
            .collect()
    }

    pub fn set_alphas(&mut self, alphas: &[f64]) -> Result<()> {
        let mut it = alphas.iter();
        for layer in &mut self.layers {
            if let LayerParams::Conv { quant: Some(q), .. } = &mut layer.params {
                let a = it
                    .next()
                    .ok_or_else(|| Error::InvalidArg("too few alphas".to_string()))?;
                if *a <= 0.0 {
                    return Err(Error::InvalidArg(format!("alpha must be positive, got {a}")));
                }
                q.alpha.value = Tensor::scalar(*a);
            }
        }
        Ok(())
    }

    pub fn set_conv_weight(&mut self, layer: usize, value: &Tensor) -> Result<()> {
        match &mut self.layers[layer].params {
            LayerParams::Conv { weight, .. } => {
                if !weight.value.same_shape(value) {
                    return Err(Error::ShapeMismatch {
                        context: "set_conv_weight",
                        detail: format!("{:?} vs {:?}", weight.value.shape(), value.shape()),
                    });
                }
                weight.value = value.clone();
                Ok(())
            }
            _ => Err(Error::InvalidArg(format!("layer {layer} is not a conv"))),
        }
    }

    /// Per cost-bearing layer (convs and the classifier) in layer order.
    pub fn layer_costs(&self) -> Vec<LayerCost> {
        let mut costs = Vec::new();
        let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(self.layers.len());
        let mut prev = (3usize, self.input_hw, self.input_hw);
        for layer in &self.layers {
            let input = match layer.spec.input {
                InputRef::Prev => prev,
                InputRef::Node(i) => shapes[i],
            };
            let out = match &layer.spec.kind {
                LayerKind::Conv { in_c, out_c, kh, kw, stride, pad, quantize } => {
                    debug_assert_eq!(*in_c, input.0);
                    let oh = (input.1 + 2 * pad - kh) / stride + 1;
                    let ow = (input.2 + 2 * pad - kw) / stride + 1;
                    costs.push(LayerCost {
                        macs: (out_c * in_c * kh * kw * oh * ow) as f64,
                        quantized: *quantize,
                    });
                    (*out_c, oh, ow)
                }
                LayerKind::Dense { in_f, out_f, quantize } => {
                    costs.push(LayerCost {
                        macs: (in_f * out_f) as f64,
                        quantized: *quantize,
                    });
                    (*out_f, 1, 1)
                }
                LayerKind::GlobalAvgPool => (input.0, 1, 1),
                _ => input,
            };
            shapes.push(out);
            prev = out;
        }
        costs
    }

    pub fn total_macs(&self) -> f64 {
        self.layer_costs().iter().map(|c| c.macs).sum()
    }

    /// Builds the tape for one batch of images under the given configuration.
    pub fn forward(&mut self, images: &Tensor, cfg: &ForwardCfg, rng: &mut Rng) -> Result<ForwardPass> {
        if images.shape().len() != 4 || images.shape()[1] != 3 {
            return Err(Error::ShapeMismatch {
                context: "MixedPrecNet::forward",
                detail: format!("expected N x 3 x H x W images, got {:?}", images.shape()),
            });
        }
        if let CoeffSource::Fixed(plan) = &cfg.coeffs {
            if plan.len() != self.quantized_layer_count() {
                return Err(Error::InvalidArg(format!(
                    "plan covers {} layers, network has {} quantized layers",
                    plan.len(),
                    self.quantized_layer_count()
                )));
            }
        }
        if let CoeffSource::FrozenStochastic { noise, .. } = &cfg.coeffs {
            if noise.len() != self.quantized_layer_count() {
                return Err(Error::InvalidArg(format!(
                    "{} noise pairs for {} quantized layers",
                    noise.len(),
                    self.quantized_layer_count()
                )));
            }
        }
        let mut tape = Tape::new();
        let input_var = tape.leaf(images.clone(), false);
        let mut outputs: Vec<VarId> = Vec::with_capacity(self.layers.len());
        let mut bindings = Vec::new();
        let mut quant_act_nodes = Vec::new();
        let mut qidx = 0usize;

        let (bn_training, bn_update) = match cfg.bn {
            BnStatsMode::TrainUpdate => (true, true),
            BnStatsMode::TrainFrozen => (true, false),
            BnStatsMode::Eval => (false, false),
        };

        for li in 0..self.layers.len() {
            let input = match self.layers[li].spec.input {
                InputRef::Prev => outputs.last().copied().unwrap_or(input_var),
                InputRef::Node(i) => outputs[i],
            };
            let kind = self.layers[li].spec.kind.clone();
            let out = match kind {
                LayerKind::Conv { stride, pad, quantize, .. } => {
                    let LayerParams::Conv { weight, quant } = &self.layers[li].params else {
                        unreachable!()
                    };
                    let w_var = tape.leaf(weight.value.clone(), true);
                    bindings.push((li, ParamField::ConvWeight, w_var));
                    let quant_here = quantize
                        && !matches!(cfg.coeffs, CoeffSource::Float)
                        && !matches!(
                            &cfg.coeffs,
                            CoeffSource::Fixed(plan) if {
                                let (bw, bx) = plan.pair(qidx);
                                bw >= NetworkPlan::BYPASS_BITS || bx >= NetworkPlan::BYPASS_BITS
                            }
                        );
                    let result = if quant_here {
                        let q = quant.as_ref().expect("quantized conv carries QuantParams");
                        let alpha_var = tape.leaf(q.alpha.value.clone(), true);
                        bindings.push((li, ParamField::Alpha, alpha_var));
                        let (w_bc, x_bc, w_bits, x_bits): (BranchCoeffs, BranchCoeffs, Vec<u32>, Vec<u32>) =
                            match &cfg.coeffs {
                                CoeffSource::Deterministic => {
                                    let r_var = tape.leaf(q.r.value.clone(), true);
                                    let s_var = tape.leaf(q.s.value.clone(), true);
                                    bindings.push((li, ParamField::StrengthR, r_var));
                                    bindings.push((li, ParamField::StrengthS, s_var));
                                    (
                                        BranchCoeffs::deterministic(&tape, r_var),
                                        BranchCoeffs::deterministic(&tape, s_var),
                                        self.bits.bits().to_vec(),
                                        self.bits.bits().to_vec(),
                                    )
                                }
                                CoeffSource::Stochastic { tau } => {
                                    let r_var = tape.leaf(q.r.value.clone(), true);
                                    let s_var = tape.leaf(q.s.value.clone(), true);
                                    bindings.push((li, ParamField::StrengthR, r_var));
                                    bindings.push((li, ParamField::StrengthS, s_var));
                                    let wn: Vec<f64> = (0..self.bits.len()).map(|_| rng.gumbel()).collect();
                                    let xn: Vec<f64> = (0..self.bits.len()).map(|_| rng.gumbel()).collect();
                                    (
                                        BranchCoeffs::stochastic(&tape, r_var, *tau, &wn),
                                        BranchCoeffs::stochastic(&tape, s_var, *tau, &xn),
                                        self.bits.bits().to_vec(),
                                        self.bits.bits().to_vec(),
                                    )
                                }
                                CoeffSource::FrozenStochastic { tau, noise } => {
                                    let r_var = tape.leaf(q.r.value.clone(), true);
                                    let s_var = tape.leaf(q.s.value.clone(), true);
                                    bindings.push((li, ParamField::StrengthR, r_var));
                                    bindings.push((li, ParamField::StrengthS, s_var));
                                    let (wn, xn) = &noise[qidx];
                                    (
                                        BranchCoeffs::stochastic(&tape, r_var, *tau, wn),
                                        BranchCoeffs::stochastic(&tape, s_var, *tau, xn),
                                        self.bits.bits().to_vec(),
                                        self.bits.bits().to_vec(),
                                    )
                                }
                                CoeffSource::Fixed(plan) => {
                                    let (bw, bx) = plan.pair(qidx);
                                    (
                                        BranchCoeffs::fixed_single(),
                                        BranchCoeffs::fixed_single(),
                                        vec![bw],
                                        vec![bx],
                                    )
                                }
                                CoeffSource::Float => unreachable!(),
                            };
                        let x_q = crate::search::quant_act_agg(
                            &mut tape, input, alpha_var, &x_bc, &x_bits, cfg.trace,
                        )?;
                        quant_act_nodes.push((li, x_q));
                        let w_q = crate::search::quant_weight_agg(
                            &mut tape, w_var, &w_bc, &w_bits, cfg.trace,
                        )?;
                        ops::conv2d(&mut tape, x_q, w_q, stride, pad)?
                    } else {
                        ops::conv2d(&mut tape, input, w_var, stride, pad)?
                    };
                    if quantize {
                        qidx += 1;
                    }
                    result
                }
                LayerKind::Dense { .. } => {
                    let LayerParams::Dense { weight, bias } = &self.layers[li].params else {
                        unreachable!()
                    };
                    let w_var = tape.leaf(weight.value.clone(), true);
                    let b_var = tape.leaf(bias.value.clone(), true);
                    bindings.push((li, ParamField::DenseWeight, w_var));
                    bindings.push((li, ParamField::DenseBias, b_var));
                    ops::dense(&mut tape, input, w_var, b_var)?
                }
                LayerKind::BatchNorm { .. } => {
                    let LayerParams::BatchNorm { gamma, beta, buffers } = &mut self.layers[li].params
                    else {
                        unreachable!()
                    };
                    let g_var = tape.leaf(gamma.value.clone(), true);
                    let b_var = tape.leaf(beta.value.clone(), true);
                    bindings.push((li, ParamField::BnGamma, g_var));
                    bindings.push((li, ParamField::BnBeta, b_var));
                    ops::batchnorm(
                        &mut tape, input, g_var, b_var, buffers, bn_training, bn_update,
                        BN_MOMENTUM, BN_EPS,
                    )?
                }
                LayerKind::Relu => ops::relu_traced(&mut tape, input, cfg.trace)?,
                LayerKind::GlobalAvgPool => ops::global_avg_pool(&mut tape, input)?,
                LayerKind::ResidualAdd { other } => ops::add(&mut tape, input, outputs[other])?,
            };
            outputs.push(out);
        }

        Ok(ForwardPass {
            logits: *outputs.last().expect("network has layers"),
            tape,
            bindings,
            quant_act_nodes,
        })
    }

    /// Forward + cross-entropy, value only (no gradients).
    pub fn loss_on_batch(&mut self, batch: &Batch, cfg: &ForwardCfg, rng: &mut Rng) -> Result<f64> {
        let pass = self.forward(&batch.images, cfg, rng)?;
        let ForwardPass { mut tape, logits, .. } = pass;
        let loss = ops::softmax_xent(&mut tape, logits, &batch.labels)?;
        Ok(tape.value(loss).item())
    }

    /// Clears optimizer buffers and gradients, e.g. when a cloned pretrained
    /// net starts a fresh training stage.
    pub fn reset_opt_state(&mut self) {
        for layer in &mut self.layers {
            match &mut layer.params {
                LayerParams::Conv { weight, quant } => {
                    weight.opt = Default::default();
                    weight.zero_grad();
                    if let Some(q) = quant {
                        for p in [&mut q.alpha, &mut q.r, &mut q.s] {
                            p.opt = Default::default();
                            p.zero_grad();
                        }
                    }
                }
                LayerParams::Dense { weight, bias } => {
                    for p in [weight, bias] {
                        p.opt = Default::default();
                        p.zero_grad();
                    }
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    for p in [gamma, beta] {
                        p.opt = Default::default();
                        p.zero_grad();
                    }
                }
                LayerParams::None => {}
            }
        }
    }

    fn zero_all_grads(&mut self) {
        for layer in &mut self.layers {
            match &mut layer.params {
                LayerParams::Conv { weight, quant } => {
                    weight.zero_grad();
                    if let Some(q) = quant {
                        q.alpha.zero_grad();
                        q.r.zero_grad();
                        q.s.zero_grad();
                    }
                }
                LayerParams::Dense { weight, bias } => {
                    weight.zero_grad();
                    bias.zero_grad();
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    gamma.zero_grad();
                    beta.zero_grad();
                }
                LayerParams::None => {}
            }
        }
    }

    /// Forward + cross-entropy + backward; gradients land in the params.
    /// Parameters that do not participate in the pass (e.g. alpha under a
    /// bypass plan) end up with no gradient and are skipped by the steps.
    pub fn backward_from_batch(&mut self, batch: &Batch, cfg: &ForwardCfg, rng: &mut Rng) -> Result<f64> {
        self.zero_all_grads();
        let pass = self.forward(&batch.images, cfg, rng)?;
        let ForwardPass { mut tape, logits, bindings, .. } = pass;
        let loss = ops::softmax_xent(&mut tape, logits, &batch.labels)?;
        let loss_val = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        for (li, field, var) in bindings {
            let grad = grads.take(var);
            let param = self.param_mut(li, field);
            match grad {
                Some(g) => param.set_grad(g),
                None => param.set_grad(Tensor::zeros(param.value.shape())),
            }
        }
        Ok(loss_val)
    }

    fn param_mut(&mut self, layer: usize, field: ParamField) -> &mut Param {
        match (&mut self.layers[layer].params, field) {
            (LayerParams::Conv { weight, .. }, ParamField::ConvWeight) => weight,
            (LayerParams::Conv { quant: Some(q), .. }, ParamField::Alpha) => &mut q.alpha,
            (LayerParams::Conv { quant: Some(q), .. }, ParamField::StrengthR) => &mut q.r,
            (LayerParams::Conv { quant: Some(q), .. }, ParamField::StrengthS) => &mut q.s,
            (LayerParams::Dense { weight, .. }, ParamField::DenseWeight) => weight,
            (LayerParams::Dense { bias, .. }, ParamField::DenseBias) => bias,
            (LayerParams::BatchNorm { gamma, .. }, ParamField::BnGamma) => gamma,
            (LayerParams::BatchNorm { beta, .. }, ParamField::BnBeta) => beta,
            _ => unreachable!("parameter binding mismatch"),
        }
    }

    /// SGD step over network weights: conv/dense weights (with weight decay),
    /// dense bias and BN affine (no decay), and alpha (its own decay rule),
    /// with alpha projected back to its positive floor afterwards.
    pub fn sgd_step_weights(&mut self, lr: f64, momentum: f64, wd_weights: f64, wd_alpha: f64) -> Result<()> {
        fn step(p: &mut Param, lr: f64, momentum: f64, wd: f64) -> Result<()> {
            if p.grad.is_some() {
                sgd_momentum_step(p, lr, momentum, wd)?;
            }
            Ok(())
        }
        for layer in &mut self.layers {
            match &mut layer.params {
                LayerParams::Conv { weight, quant } => {
                    step(weight, lr, momentum, wd_weights)?;
                    if let Some(q) = quant {
                        step(&mut q.alpha, lr, momentum, wd_alpha)?;
                        let a = q.alpha.value.item();
                        if a < ALPHA_MIN {
                            q.alpha.value = Tensor::scalar(ALPHA_MIN);
                        }
                    }
                }
                LayerParams::Dense { weight, bias } => {
                    step(weight, lr, momentum, wd_weights)?;
                    step(bias, lr, momentum, 0.0)?;
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    step(gamma, lr, momentum, 0.0)?;
                    step(beta, lr, momentum, 0.0)?;
                }
                LayerParams::None => {}
            }
        }
        Ok(())
    }

    pub fn adam_step_strengths(&mut self, lr: f64) -> Result<()> {
        for layer in &mut self.layers {
            if let LayerParams::Conv { quant: Some(q), .. } = &mut layer.params {
                if q.r.grad.is_some() {
                    adam_step(&mut q.r, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)?;
                }
                if q.s.grad.is_some() {
                    adam_step(&mut q.s, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)?;
                }
            }
        }
        Ok(())
    }

    /// Adds scaled gradient contributions (e.g. the FLOPs penalty) onto the
    /// strength gradients produced by the last backward pass.
    pub fn add_strength_grads(&mut self, grads: &[(Vec<f64>, Vec<f64>)], scale: f64) -> Result<()> {
        let mut it = grads.iter();
        for layer in &mut self.layers {
            if let LayerParams::Conv { quant: Some(q), .. } = &mut layer.params {
                let (gr, gs) = it
                    .next()
                    .ok_or_else(|| Error::InvalidArg("too few strength gradients".to_string()))?;
                for (param, add) in [(&mut q.r, gr), (&mut q.s, gs)] {
                    let grad = param
                        .grad
                        .get_or_insert_with(|| Tensor::zeros(param.value.shape()));
                    for (g, &a) in grad.data_mut().iter_mut().zip(add) {
                        *g += scale * a;
                    }
                }
            }
        }
        Ok(())
    }

    fn eval_coeffs(&self) -> (CoeffSource<'static>, Option<NetworkPlan>) {
        match &self.mode {
            NetMode::Fixed(plan) => (CoeffSource::Deterministic, Some(plan.clone())),
            _ => (CoeffSource::Deterministic, None),
        }
    }

    /// Predicted labels for a batch under evaluation semantics (running BN
    /// stats, deterministic coefficients or the fixed plan).
    pub fn predict(&mut self, images: &Tensor) -> Result<Vec<usize>> {
        let (_, plan) = self.eval_coeffs();
        let mut rng = Rng::new(0);
        let cfg = match &plan {
            Some(p) => ForwardCfg::eval(CoeffSource::Fixed(p)),
            None => ForwardCfg::eval(CoeffSource::Deterministic),
        };
        let pass = self.forward(images, &cfg, &mut rng)?;
        Ok(argmax_rows(pass.tape.value(pass.logits)))
    }

    pub fn evaluate_split(&mut self, dataset: &Dataset, split: &str, batch_size: usize) -> Result<f64> {
        let indices = dataset.split(split)?.to_vec();
        let mut correct = 0usize;
        let mut total = 0usize;
        for chunk in indices.chunks(batch_size.max(1)) {
            let batch = dataset.gather(chunk)?;
            let preds = self.predict(&batch.images)?;
            correct += preds
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
            total += chunk.len();
        }
        Ok(correct as f64 / total.max(1) as f64)
    }

    /// Search-mode logits (deterministic or stochastic per the net mode).
    pub fn forward_search(&mut self, images: &Tensor, tau: f64, rng: &mut Rng) -> Result<Tensor> {
        let coeffs = match self.mode {
            NetMode::SearchSto => CoeffSource::Stochastic { tau },
            _ => CoeffSource::Deterministic,
        };
        let cfg = ForwardCfg { coeffs, bn: BnStatsMode::Eval, trace: None };
        let pass = self.forward(images, &cfg, rng)?;
        Ok(pass.tape.value(pass.logits).clone())
    }

    /// Fixed-plan logits (the retraining/evaluation path).
    pub fn forward_fixed(&mut self, images: &Tensor, plan: &NetworkPlan) -> Result<Tensor> {
        let mut rng = Rng::new(0);
        let cfg = ForwardCfg::eval(CoeffSource::Fixed(plan));
        let pass = self.forward(images, &cfg, &mut rng)?;
        Ok(pass.tape.value(pass.logits).clone())
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    (0..n)
        .map(|row| {
            let r = &logits.data()[row * k..(row + 1) * k];
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

// ---------------------------------------------------------------------------
// retraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay_high: f64,
    pub weight_decay_low: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.04,
            momentum: 0.9,
            weight_decay_high: 5e-4,
            weight_decay_low: 1e-4,
            augment: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrainMetrics {
    pub train_acc: f64,
    pub eval_acc: f64,
    pub eval_split: String,
    pub epochs: usize,
    pub final_train_loss: f64,
}

fn plan_is_low_bit(plan: &NetworkPlan) -> bool {
    if plan.is_empty() {
        return false;
    }
    let mean_w: f64 = plan.pairs().iter().map(|&(bw, _)| bw as f64).sum::<f64>() / plan.len() as f64;
    mean_w <= 2.0
}

/// Fixed-plan training with SGD+momentum and a cosine-annealed learning
/// rate. No architecture parameters and no FLOPs penalty take part. Low-bit
/// plans use the reduced weight decay and exclude alpha from decay.
pub fn retrain(
    net: &mut MixedPrecNet,
    dataset: &Dataset,
    plan: &NetworkPlan,
    cfg: &RetrainConfig,
) -> Result<RetrainMetrics> {
    if plan.len() != net.quantized_layer_count() {
        return Err(Error::InvalidArg(format!(
            "plan covers {} layers, network has {} quantized layers",
            plan.len(),
            net.quantized_layer_count()
        )));
    }
    net.mode = NetMode::Fixed(plan.clone());
    let low_bit = plan_is_low_bit(plan);
    let (wd, wd_alpha) = if low_bit {
        (cfg.weight_decay_low, 0.0)
    } else {
        (cfg.weight_decay_high, cfg.weight_decay_high)
    };
    let eval_split = if dataset.has_split("test") { "test" } else { "valid" };

    let mut rng = Rng::new(cfg.seed ^ 0x7e7a_11);
    let train_idx = dataset.split("train")?.to_vec();
    let mut last_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let mut order = train_idx.clone();
        rng.shuffle(&mut order);
        let iters = (order.len() / cfg.batch_size).max(1);
        let mut loss_sum = 0.0;
        for it in 0..iters {
            let mut batch = dataset.gather_batch(&order, it, cfg.batch_size)?;
            if cfg.augment {
                batch = augment_batch(&batch, &mut rng);
            }
            let plan_clone = plan.clone();
            let fwd = ForwardCfg {
                coeffs: CoeffSource::Fixed(&plan_clone),
                bn: BnStatsMode::TrainUpdate,
                trace: None,
            };
            let loss = net.backward_from_batch(&batch, &fwd, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite retraining loss at epoch {epoch}"
                )));
            }
            loss_sum += loss;
            net.sgd_step_weights(lr, cfg.momentum, wd, wd_alpha)?;
        }
        last_loss = loss_sum / iters as f64;
    }

    let train_acc = net.evaluate_split(dataset, "train", cfg.batch_size)?;
    let eval_acc = net.evaluate_split(dataset, eval_split, cfg.batch_size)?;
    Ok(RetrainMetrics {
        train_acc,
        eval_acc,
        eval_split: eval_split.to_string(),
        epochs: cfg.epochs,
        final_train_loss: last_loss,
    })
}

// ---------------------------------------------------------------------------
// checkpoints: JSON manifest + little-endian f64 blob
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset and length in f64 elements within the blob.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    arch: String,
    num_classes: usize,
    bits: Vec<u32>,
    mode: NetMode,
    alphas: Vec<f64>,
    strengths: Vec<(Vec<f64>, Vec<f64>)>,
    blob: String,
    tensors: Vec<TensorEntry>,
}

impl MixedPrecNet {
    fn blob_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            match &layer.params {
                LayerParams::Conv { weight, .. } => {
                    out.push((format!("l{li}.weight"), &weight.value));
                }
                LayerParams::Dense { weight, bias } => {
                    out.push((format!("l{li}.weight"), &weight.value));
                    out.push((format!("l{li}.bias"), &bias.value));
                }
                LayerParams::BatchNorm { gamma, beta, buffers } => {
                    out.push((format!("l{li}.gamma"), &gamma.value));
                    out.push((format!("l{li}.beta"), &beta.value));
                    out.push((format!("l{li}.running_mean"), &buffers.running_mean));
                    out.push((format!("l{li}.running_var"), &buffers.running_var));
                }
                LayerParams::None => {}
            }
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.bin`; the manifest carries the plan,
    /// alphas and strengths, the blob carries every other tensor bit-exactly.
    pub fn save_checkpoint(&self, stem: &Path) -> Result<()> {
        let tensors = self.blob_tensors();
        let mut entries = Vec::with_capacity(tensors.len());
        let mut blob: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        for (name, t) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel(),
            });
            for &v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.numel();
        }
        let blob_name = format!(
            "{}.bin",
            stem.file_name().and_then(|s| s.to_str()).unwrap_or("model")
        );
        let manifest = CheckpointManifest {
            arch: self.arch.clone(),
            num_classes: self.num_classes,
            bits: self.bits.bits().to_vec(),
            mode: self.mode.clone(),
            alphas: self.alphas(),
            strengths: self.strengths(),
            blob: blob_name,
            tensors: entries,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        std::fs::write(stem.with_extension("json"), json)?;
        std::fs::write(stem.with_extension("bin"), blob)?;
        Ok(())
    }

    pub fn load_checkpoint(stem: &Path) -> Result<MixedPrecNet> {
        let json = std::fs::read_to_string(stem.with_extension("json"))?;
        let manifest: CheckpointManifest = serde_json::from_str(&json)
            .map_err(|e| Error::Format(format!("manifest parse: {e}")))?;
        let bits = BitwidthSet::new(manifest.bits.clone())?;
        let mut net = build_arch(&manifest.arch, manifest.num_classes, bits, 0)?;
        net.mode = manifest.mode.clone();

        let blob_path = stem
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.blob);
        let bytes = std::fs::read(&blob_path)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format("blob length not a multiple of 8".to_string()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut by_name: std::collections::BTreeMap<&str, &TensorEntry> = Default::default();
        for e in &manifest.tensors {
            by_name.insert(e.name.as_str(), e);
        }
        let assign = |name: String, target: &mut Tensor| -> Result<()> {
            let entry = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))?;
            if entry.shape != target.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: shape {:?} does not match architecture {:?}",
                    entry.shape,
                    target.shape()
                )));
            }
            let data = values
                .get(entry.offset..entry.offset + entry.len)
                .ok_or_else(|| Error::Format(format!("tensor {name}: blob range out of bounds")))?;
            *target = Tensor::new(entry.shape.clone(), data.to_vec())?;
            Ok(())
        };
        for li in 0..net.layers.len() {
            match &mut net.layers[li].params {
                LayerParams::Conv { weight, .. } => assign(format!("l{li}.weight"), &mut weight.value)?,
                LayerParams::Dense { weight, bias } => {
                    assign(format!("l{li}.weight"), &mut weight.value)?;
                    assign(format!("l{li}.bias"), &mut bias.value)?;
                }
                LayerParams::BatchNorm { gamma, beta, buffers } => {
                    assign(format!("l{li}.gamma"), &mut gamma.value)?;
                    assign(format!("l{li}.beta"), &mut beta.value)?;
                    assign(format!("l{li}.running_mean"), &mut buffers.running_mean)?;
                    assign(format!("l{li}.running_var"), &mut buffers.running_var)?;
                }
                LayerParams::None => {}
            }
        }
        net.set_strengths(&manifest.strengths)?;
        let mut it = manifest.alphas.iter();
        for layer in &mut net.layers {
            if let LayerParams::Conv { quant: Some(q), .. } = &mut layer.params {
                let a = it
                    .next()
                    .ok_or_else(|| Error::Format("too few alphas in manifest".to_string()))?;
                q.alpha.value = Tensor::scalar(*a);
            }
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::network_flops;
    use crate::ops::{conv_call_count, reset_conv_call_count};

    fn default_bits() -> BitwidthSet {
        BitwidthSet::default()
    }

    #[test]
    fn tinynet_shapes_and_structure() {
        let mut net = build_tinynet(10, default_bits(), 1).unwrap();
        assert_eq!(net.quantized_layer_count(), 3);
        for (r, s) in net.strengths() {
            assert_eq!(r.len(), 5);
            assert_eq!(s.len(), 5);
        }
        // quantizable layer count = convs + dense - 2
        let convs = net
            .layers()
            .iter()
            .filter(|l| matches!(l.spec.kind, LayerKind::Conv { .. }))
            .count();
        assert_eq!(net.quantized_layer_count(), convs + 1 - 2);

        let mut rng = Rng::new(0);
        let images = Tensor::randn(&[4, 3, 16, 16], 0.5, &mut rng);
        let cfg = ForwardCfg {
            coeffs: CoeffSource::Deterministic,
            bn: BnStatsMode::TrainFrozen,
            trace: None,
        };
        let pass = net.forward(&images, &cfg, &mut rng).unwrap();
        assert_eq!(pass.tape.value(pass.logits).shape(), &[4, 10]);
    }

    #[test]
    fn tinynet_flops_ratio_on_quantized_portion() {
        let net = build_tinynet(10, default_bits(), 1).unwrap();
        let costs = net.layer_costs();
        let q = net.quantized_layer_count();
        let all5 = NetworkPlan::uniform(5, q);
        let all1 = NetworkPlan::uniform(1, q);
        let unquant: f64 = costs.iter().filter(|c| !c.quantized).map(|c| c.macs).sum();
        let f5 = network_flops(&all5, &costs).unwrap() - unquant;
        let f1 = network_flops(&all1, &costs).unwrap() - unquant;
        assert!((f5 / f1 - 25.0).abs() < 1e-9, "ratio {}", f5 / f1);
    }

    #[test]
    fn resnet20_matches_reference_architecture() {
        let mut net = build_resnet20(10, default_bits(), 2).unwrap();
        // independent enumeration of the standard CIFAR ResNet-20:
        // convs: 432 stem + stage params, bn affine, fc
        let expected_params = 272_474;
        assert_eq!(net.param_count(), expected_params);

        let macs = net.total_macs();
        let table = 40.81e6;
        assert!((macs - table).abs() / table < 0.03, "macs {macs}");

        assert_eq!(net.quantized_layer_count(), 20);

        let mut rng = Rng::new(0);
        let images = Tensor::zeros(&[1, 3, 32, 32]);
        let cfg = ForwardCfg {
            coeffs: CoeffSource::Deterministic,
            bn: BnStatsMode::TrainFrozen,
            trace: None,
        };
        let pass = net.forward(&images, &cfg, &mut rng).unwrap();
        let logits = pass.tape.value(pass.logits);
        assert_eq!(logits.shape(), &[1, 10]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_candidate_search_equals_fixed_forward() {
        let bits = BitwidthSet::new(vec![3]).unwrap();
        let mut net = build_tinynet(4, bits, 3).unwrap();
        let mut rng = Rng::new(1);
        let images = Tensor::randn(&[2, 3, 16, 16], 0.4, &mut rng).map(|v| v.abs().min(1.0));

        let search_logits = net.forward_search(&images, 1.0, &mut rng).unwrap();
        let plan = NetworkPlan::uniform(3, 3);
        let fixed_logits = net.forward_fixed(&images, &plan).unwrap();
        for (a, b) in search_logits.data().iter().zip(fixed_logits.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn one_convolution_per_quantized_layer_regardless_of_candidates() {
        for bits in [vec![3], vec![1, 3, 5], vec![1, 2, 3, 4, 5]] {
            let n_candidates = bits.len();
            let mut net = build_tinynet(4, BitwidthSet::new(bits).unwrap(), 3).unwrap();
            let mut rng = Rng::new(1);
            let images = Tensor::randn(&[2, 3, 16, 16], 0.4, &mut rng);
            let cfg = ForwardCfg {
                coeffs: CoeffSource::Deterministic,
                bn: BnStatsMode::TrainFrozen,
                trace: None,
            };
            reset_conv_call_count();
            net.forward(&images, &cfg, &mut rng).unwrap();
            // 4 convs total (1 stem + 3 quantized), one invocation each
            assert_eq!(conv_call_count(), 4, "candidates = {n_candidates}");
            assert_eq!(net.meta_weight_tensors_per_quantized_layer(), vec![1, 1, 1]);
        }
    }

    #[test]
    fn saturated_strengths_reproduce_fixed_plan_logits() {
        let mut net = build_tinynet(4, default_bits(), 5).unwrap();
        let mut rng = Rng::new(2);
        let images = Tensor::randn(&[2, 3, 16, 16], 0.4, &mut rng);

        // saturate all strengths on bit 2 (index 1) with gap 40
        let strengths: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
            .map(|_| {
                let mut r = vec![0.0; 5];
                r[1] = 40.0;
                (r.clone(), r)
            })
            .collect();
        net.set_strengths(&strengths).unwrap();

        let search_logits = net.forward_search(&images, 1.0, &mut rng).unwrap();
        let plan = NetworkPlan::uniform(2, 3);
        let fixed_logits = net.forward_fixed(&images, &plan).unwrap();
        for (a, b) in search_logits.data().iter().zip(fixed_logits.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn bypass_plan_matches_float_network() {
        let mut net = build_tinynet(4, default_bits(), 7).unwrap();
        let mut rng = Rng::new(3);
        let images = Tensor::randn(&[2, 3, 16, 16], 0.4, &mut rng);

        let bypass = NetworkPlan::uniform(NetworkPlan::BYPASS_BITS, 3);
        let a = net.forward_fixed(&images, &bypass).unwrap();
        let cfg = ForwardCfg::eval(CoeffSource::Float);
        let pass = net.forward(&images, &cfg, &mut rng).unwrap();
        let b = pass.tape.value(pass.logits);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn fixed_plan_activations_live_on_their_grids() {
        let mut net = build_tinynet(4, default_bits(), 9).unwrap();
        let mut rng = Rng::new(4);
        let images = Tensor::randn(&[2, 3, 16, 16], 0.4, &mut rng).map(f64::abs);
        let plan = NetworkPlan::new(vec![(2, 2), (3, 4), (1, 3)]);
        let plan2 = NetworkPlan::new(vec![(2, 3), (3, 2), (1, 5)]);
        let alphas = net.alphas();

        for (plan_idx, p) in [plan, plan2].iter().enumerate() {
            let cfg = ForwardCfg::eval(CoeffSource::Fixed(p));
            let pass = net.forward(&images, &cfg, &mut rng).unwrap();
            for (qi, (_, var)) in pass.quant_act_nodes.iter().enumerate() {
                let alpha = alphas[qi];
                let (_, bx) = p.pair(qi);
                let lv = ((1u64 << bx) - 1) as f64;
                for &v in pass.tape.value(*var).data() {
                    let code = v * lv / alpha;
                    assert!(
                        (code - code.round()).abs() < 1e-9,
                        "plan {plan_idx} layer {qi}: {v} off the alpha grid"
                    );
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("mixbit_ckpt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut net = build_tinynet(6, default_bits(), 11).unwrap();
        net.mode = NetMode::Fixed(NetworkPlan::new(vec![(1, 2), (3, 4), (5, 1)]));
        let strengths: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
            .map(|i| {
                (
                    vec![i as f64 * 0.25; 5],
                    vec![-(i as f64) * 0.5, 0.1, 0.2, 0.3, 0.4],
                )
            })
            .collect();
        net.set_strengths(&strengths).unwrap();

        let stem = dir.join("model");
        net.save_checkpoint(&stem).unwrap();
        let mut loaded = MixedPrecNet::load_checkpoint(&stem).unwrap();

        assert_eq!(loaded.mode, net.mode);
        assert_eq!(loaded.strengths(), net.strengths());
        assert_eq!(loaded.alphas(), net.alphas());
        let mut rng = Rng::new(5);
        let images = Tensor::randn(&[2, 3, 16, 16], 0.4, &mut rng);
        let plan = NetworkPlan::new(vec![(1, 2), (3, 4), (5, 1)]);
        let a = net.forward_fixed(&images, &plan).unwrap();
        let b = loaded.forward_fixed(&images, &plan).unwrap();
        assert_eq!(a.data(), b.data());

        // blob size depends only on the architecture, not the candidate count
        let bits1 = BitwidthSet::new(vec![3]).unwrap();
        let net1 = build_tinynet(6, bits1, 11).unwrap();
        let stem1 = dir.join("model_b1");
        net1.save_checkpoint(&stem1).unwrap();
        let blob5 = std::fs::metadata(stem.with_extension("bin")).unwrap().len();
        let blob1 = std::fs::metadata(stem1.with_extension("bin")).unwrap().len();
        assert_eq!(blob5, blob1);

        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn retrain_zero_epochs_changes_nothing() {
        let mut net = build_tinynet(3, default_bits(), 13).unwrap();
        let ds = crate::dataio::gen_synthetic(3, 10, 16, 1).unwrap();
        let plan = NetworkPlan::uniform(3, 3);
        let before: Vec<f64> = net
            .layers()
            .iter()
            .filter_map(|l| match &l.params {
                LayerParams::Conv { weight, .. } => Some(weight.value.data().to_vec()),
                _ => None,
            })
            .flatten()
            .collect();
        let cfg = RetrainConfig { epochs: 0, ..Default::default() };
        let metrics = retrain(&mut net, &ds, &plan, &cfg).unwrap();
        assert_eq!(metrics.epochs, 0);
        let after: Vec<f64> = net
            .layers()
            .iter()
            .filter_map(|l| match &l.params {
                LayerParams::Conv { weight, .. } => Some(weight.value.data().to_vec()),
                _ => None,
            })
            .flatten()
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn forward_fixed_rejects_partial_plan() {
        let mut net = build_tinynet(4, default_bits(), 1).unwrap();
        let images = Tensor::zeros(&[1, 3, 16, 16]);
        let short = NetworkPlan::uniform(3, 2);
        assert!(net.forward_fixed(&images, &short).is_err());
    }

    #[test]
    fn retraining_reaches_high_train_accuracy_at_two_bits() {
        let mut net = build_tinynet(6, default_bits(), 21).unwrap();
        let ds = crate::dataio::gen_synthetic(6, 30, 16, 21).unwrap();
        let plan = NetworkPlan::uniform(2, 3);
        let cfg = RetrainConfig {
            epochs: 30,
            batch_size: 32,
            augment: false,
            seed: 21,
            ..Default::default()
        };
        let metrics = retrain(&mut net, &ds, &plan, &cfg).unwrap();
        assert!(metrics.train_acc >= 0.9, "train accuracy {}", metrics.train_acc);
    }

    #[test]
    fn progressive_init_loads_across_plans() {
        // meta weights are bitwidth-independent, so a checkpoint trained at
        // one plan initializes a retrain at another without shape errors
        let dir = std::env::temp_dir().join(format!("mixbit_prog_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut net = build_tinynet(3, default_bits(), 17).unwrap();
        net.mode = NetMode::Fixed(NetworkPlan::uniform(5, 3));
        let stem = dir.join("high");
        net.save_checkpoint(&stem).unwrap();
        let mut warm = MixedPrecNet::load_checkpoint(&stem).unwrap();
        let ds = crate::dataio::gen_synthetic(3, 8, 16, 2).unwrap();
        let cfg = RetrainConfig { epochs: 1, batch_size: 8, augment: false, ..Default::default() };
        let plan = NetworkPlan::uniform(2, 3);
        retrain(&mut warm, &ds, &plan, &cfg).unwrap();
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
