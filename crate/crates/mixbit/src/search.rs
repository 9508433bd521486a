//! Differentiable bitwidth search.
//!
//! Each quantized layer keeps one meta weight tensor and one strength vector
//! per side (r for weights, s for activations). The quantized branches of
//! every candidate bitwidth are aggregated by softmax (deterministic) or
//! Gumbel-Softmax (stochastic) coefficients *before* the convolution, so the
//! layer performs exactly one convolution and stores exactly one weight
//! tensor regardless of how many bitwidths compete.

use serde::{Deserialize, Serialize};

use crate::costmodel::{self, LayerCost};
use crate::dataio::Batch;
use crate::error::{Error, Result};
use crate::network::{BnStatsMode, CoeffSource, ForwardCfg, MixedPrecNet};
use crate::optim::cosine_lr;
use crate::quantizer::{quantize_grid_unchecked, quantize_weights, QuantTrace};
use crate::rng::Rng;
use crate::tape::{GradSink, Node, Tape, TapeOp, VarId};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// domain types
// ---------------------------------------------------------------------------

/// Candidate bitwidths, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitwidthSet {
    bits: Vec<u32>,
}

impl Default for BitwidthSet {
    fn default() -> Self {
        Self { bits: vec![1, 2, 3, 4, 5] }
    }
}

impl BitwidthSet {
    pub fn new(bits: Vec<u32>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidArg("bitwidth set must be non-empty".to_string()));
        }
        if bits[0] < 1 {
            return Err(Error::InvalidArg("bitwidths must be >= 1".to_string()));
        }
        if bits.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArg(format!(
                "bitwidths must be strictly increasing, got {bits:?}"
            )));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[u32] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrengthRole {
    Weight,
    Activation,
}

/// Learnable selection logits over the candidate bitwidths of one layer side.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrengthVector {
    pub values: Vec<f64>,
    pub role: StrengthRole,
}

impl StrengthVector {
    pub fn zeros(len: usize, role: StrengthRole) -> Self {
        Self { values: vec![0.0; len], role }
    }

    pub fn coeffs(&self) -> Vec<f64> {
        softmax_coeffs(&self.values)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub tau_start: f64,
    pub tau_end: f64,
    pub rng_seed: u64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        Self { tau_start: 1.0, tau_end: 0.4, rng_seed: 0 }
    }
}

impl GumbelConfig {
    /// Linear per-epoch temperature schedule from tau_start to tau_end.
    pub fn tau_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        if total_epochs <= 1 {
            return self.tau_start;
        }
        let frac = epoch as f64 / (total_epochs - 1) as f64;
        self.tau_start + (self.tau_end - self.tau_start) * frac
    }
}

/// Selected (weight bitwidth, activation bitwidth) per quantized layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pairs: Vec<(u32, u32)>,
}

impl NetworkPlan {
    /// Sentinel bitwidth meaning "skip quantization" (full-precision layer).
    pub const BYPASS_BITS: u32 = 32;

    pub fn new(pairs: Vec<(u32, u32)>) -> Self {
        Self { pairs }
    }

    pub fn uniform(bits: u32, layers: usize) -> Self {
        Self { pairs: vec![(bits, bits); layers] }
    }

    pub fn pair(&self, layer: usize) -> (u32, u32) {
        self.pairs[layer]
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

// ---------------------------------------------------------------------------
// coefficients
// ---------------------------------------------------------------------------

/// Numerically-stable softmax over strength values.
pub fn softmax_coeffs(strengths: &[f64]) -> Vec<f64> {
    let max = strengths.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = strengths.iter().map(|&v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// Gumbel-Softmax coefficients softmax((log p_i + g_i)/tau) with p = softmax(r)
/// and the provided noise vector g.
pub fn gumbel_coeffs_with_noise(strengths: &[f64], tau: f64, noise: &[f64]) -> Vec<f64> {
    debug_assert!(tau > 0.0);
    debug_assert_eq!(strengths.len(), noise.len());
    let probs = softmax_coeffs(strengths);
    let z: Vec<f64> = probs
        .iter()
        .zip(noise)
        .map(|(&p, &g)| (p.ln() + g) / tau)
        .collect();
    softmax_coeffs(&z)
}

/// Gumbel-Softmax coefficients with fresh Gumbel(0,1) noise from `rng`.
pub fn gumbel_coeffs(strengths: &[f64], tau: f64, rng: &mut Rng) -> Vec<f64> {
    let noise: Vec<f64> = strengths.iter().map(|_| rng.gumbel()).collect();
    gumbel_coeffs_with_noise(strengths, tau, &noise)
}

/// Argmax bitwidth selection per layer side; ties break toward the smallest
/// candidate (the first maximal entry, since candidates are increasing).
pub fn select_plan(strengths: &[(Vec<f64>, Vec<f64>)], bits: &BitwidthSet) -> NetworkPlan {
    let pick = |v: &[f64]| -> u32 {
        let mut best = 0usize;
        for (i, &x) in v.iter().enumerate() {
            if x > v[best] {
                best = i;
            }
        }
        bits.bits()[best]
    };
    NetworkPlan::new(strengths.iter().map(|(r, s)| (pick(r), pick(s))).collect())
}

/// Elementwise convex combination of already-quantized branch tensors.
pub fn aggregate_quantized(branches: &[Tensor], coeffs: &[f64]) -> Result<Tensor> {
    if branches.is_empty() || branches.len() != coeffs.len() {
        return Err(Error::ShapeMismatch {
            context: "aggregate_quantized",
            detail: format!("{} branches vs {} coefficients", branches.len(), coeffs.len()),
        });
    }
    if branches.iter().any(|b| !b.same_shape(&branches[0])) {
        return Err(Error::ShapeMismatch {
            context: "aggregate_quantized",
            detail: "branch tensors differ in shape".to_string(),
        });
    }
    let mut out = vec![0.0; branches[0].numel()];
    for (branch, &c) in branches.iter().zip(coeffs) {
        for (o, &v) in out.iter_mut().zip(branch.data()) {
            *o += c * v;
        }
    }
    Ok(Tensor::from_raw(branches[0].shape().to_vec(), out))
}

// ---------------------------------------------------------------------------
// fused aggregation ops on the tape
// ---------------------------------------------------------------------------

/// How branch coefficients were produced, for routing strength gradients.
#[derive(Debug, Clone)]
pub enum CoeffInfo {
    /// Fixed coefficients (retraining / evaluation path): no strength grad.
    Fixed,
    /// coeffs = softmax(strength).
    Softmax { strength: VarId },
    /// coeffs = softmax((log softmax(strength) + noise)/tau).
    Gumbel { strength: VarId, tau: f64, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct BranchCoeffs {
    pub coeffs: Vec<f64>,
    pub info: CoeffInfo,
}

impl BranchCoeffs {
    pub fn fixed_single() -> Self {
        Self { coeffs: vec![1.0], info: CoeffInfo::Fixed }
    }

    pub fn deterministic(tape: &Tape, strength: VarId) -> Self {
        let coeffs = softmax_coeffs(tape.value(strength).data());
        Self { coeffs, info: CoeffInfo::Softmax { strength } }
    }

    pub fn stochastic(tape: &Tape, strength: VarId, tau: f64, noise: &[f64]) -> Self {
        let values = tape.value(strength).data();
        let probs = softmax_coeffs(values);
        let coeffs = gumbel_coeffs_with_noise(values, tau, noise);
        Self { coeffs, info: CoeffInfo::Gumbel { strength, tau, probs } }
    }
}

/// Routes d(loss)/d(coeff-logits) back to the strength vector.
/// `branch_dots[j]` is sum_e grad_out_e * branch_j_e.
fn strength_grad_from_branch_dots(coeffs: &[f64], info: &CoeffInfo, branch_dots: &[f64]) -> Option<(VarId, Tensor)> {
    match info {
        CoeffInfo::Fixed => None,
        CoeffInfo::Softmax { strength } => {
            let s: f64 = coeffs.iter().zip(branch_dots).map(|(&c, &e)| c * e).sum();
            let g: Vec<f64> = coeffs
                .iter()
                .zip(branch_dots)
                .map(|(&c, &e)| c * (e - s))
                .collect();
            Some((*strength, Tensor::from_raw(vec![g.len()], g)))
        }
        CoeffInfo::Gumbel { strength, tau, probs } => {
            let s: f64 = coeffs.iter().zip(branch_dots).map(|(&c, &e)| c * e).sum();
            let gz: Vec<f64> = coeffs
                .iter()
                .zip(branch_dots)
                .map(|(&c, &e)| c * (e - s))
                .collect();
            let gz_sum: f64 = gz.iter().sum();
            let g: Vec<f64> = gz
                .iter()
                .zip(probs)
                .map(|(&gzj, &pj)| (gzj - pj * gz_sum) / tau)
                .collect();
            Some((*strength, Tensor::from_raw(vec![g.len()], g)))
        }
    }
}

struct WeightAggOp {
    weight: VarId,
    coeffs: Vec<f64>,
    info: CoeffInfo,
    levels: Vec<f64>,
}

impl TapeOp for WeightAggOp {
    fn backward(&self, grad_out: &Tensor, nodes: &[Node], sink: &mut GradSink) {
        let w = &nodes[self.weight.0].value;
        let t = w.map(f64::tanh);
        let m = t.max_abs();
        if m == 0.0 {
            if nodes[self.weight.0].requires_grad {
                sink.add(self.weight, Tensor::zeros(w.shape()));
            }
            return;
        }
        let argmax = t
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let sign = t.data()[argmax].signum();

        let need_strength = !matches!(self.info, CoeffInfo::Fixed);
        let mut branch_dots = vec![0.0; self.levels.len()];
        if need_strength {
            let inv_levels: Vec<f64> = self.levels.iter().map(|&lv| 1.0 / lv).collect();
            let inv = 1.0 / (2.0 * m);
            for (&g, &tv) in grad_out.data().iter().zip(t.data()) {
                let u = tv * inv + 0.5;
                for (j, &lv) in self.levels.iter().enumerate() {
                    branch_dots[j] += g * (2.0 * ((lv * u + 0.5).floor() * inv_levels[j]) - 1.0);
                }
            }
            if let Some((var, grad)) = strength_grad_from_branch_dots(&self.coeffs, &self.info, &branch_dots) {
                if nodes[var.0].requires_grad {
                    sink.add(var, grad);
                }
            }
        }

        if nodes[self.weight.0].requires_grad {
            // STE through the rounding: dA/du = 2*sum(coeffs); tanh/max chain exact.
            let coeff_sum: f64 = self.coeffs.iter().sum();
            let mut gu: Vec<f64> = grad_out.data().iter().map(|&g| 2.0 * coeff_sum * g).collect();
            let dot: f64 = gu.iter().zip(t.data()).map(|(&g, &tv)| g * tv).sum();
            let mut gw = vec![0.0; w.numel()];
            for i in 0..w.numel() {
                let mut gt = gu[i] / (2.0 * m);
                if i == argmax {
                    gt -= sign * dot / (2.0 * m * m);
                }
                gw[i] = gt * (1.0 - t.data()[i] * t.data()[i]);
            }
            gu.clear();
            sink.add(self.weight, Tensor::from_raw(w.shape().to_vec(), gw));
        }
    }
}

/// Aggregated weight quantization: sum_i coeffs_i * W_hat^i computed in one
/// pass over the meta weight, recording rounding residuals when a trace is
/// active. Single-branch fixed coefficients give the plain retraining path.
pub fn quant_weight_agg(
    tape: &mut Tape,
    weight: VarId,
    bc: &BranchCoeffs,
    bits: &[u32],
    trace: Option<&std::cell::RefCell<QuantTrace>>,
) -> Result<VarId> {
    if bc.coeffs.len() != bits.len() {
        return Err(Error::ShapeMismatch {
            context: "quant_weight_agg",
            detail: format!("{} coeffs vs {} bitwidths", bc.coeffs.len(), bits.len()),
        });
    }
    let levels: Vec<f64> = bits.iter().map(|&b| crate::quantizer::levels(b)).collect();
    let w = tape.value(weight);
    let t = w.map(f64::tanh);
    let m = t.max_abs();
    let out = if m == 0.0 {
        Tensor::zeros(w.shape())
    } else {
        let mut data = vec![0.0; w.numel()];
        match trace {
            None => {
                // (coeff, levels, 1/levels) per branch; multiply by the
                // precomputed inverse instead of dividing in the hot loop
                let pairs: Vec<(f64, f64, f64)> = bc
                    .coeffs
                    .iter()
                    .zip(&levels)
                    .map(|(&c, &lv)| (c, lv, 1.0 / lv))
                    .collect();
                let inv = 1.0 / (2.0 * m);
                for (o, &tv) in data.iter_mut().zip(t.data()) {
                    let u = tv * inv + 0.5;
                    let mut acc = 0.0;
                    for &(c, lv, lv_inv) in &pairs {
                        acc += c * (2.0 * ((lv * u + 0.5).floor() * lv_inv) - 1.0);
                    }
                    *o = acc;
                }
            }
            Some(tr) => {
                let mut tr = tr.borrow_mut();
                for (o, &tv) in data.iter_mut().zip(t.data()) {
                    let u = tv / (2.0 * m) + 0.5;
                    let mut acc = 0.0;
                    for (&c, &lv) in bc.coeffs.iter().zip(&levels) {
                        let q = u + tr.residual(|| quantize_grid_unchecked(u, lv) - u);
                        acc += c * (2.0 * q - 1.0);
                    }
                    *o = acc;
                }
            }
        }
        Tensor::from_raw(w.shape().to_vec(), data)
    };
    let rg = tape.requires_grad(weight)
        || match bc.info {
            CoeffInfo::Fixed => false,
            CoeffInfo::Softmax { strength } | CoeffInfo::Gumbel { strength, .. } => {
                tape.requires_grad(strength)
            }
        };
    tape.push(
        out,
        rg,
        Box::new(WeightAggOp {
            weight,
            coeffs: bc.coeffs.clone(),
            info: bc.info.clone(),
            levels,
        }),
        "quant_weight_agg",
    )
}

struct ActAggOp {
    input: VarId,
    alpha: VarId,
    coeffs: Vec<f64>,
    info: CoeffInfo,
    levels: Vec<f64>,
}

impl TapeOp for ActAggOp {
    fn backward(&self, grad_out: &Tensor, nodes: &[Node], sink: &mut GradSink) {
        let x = &nodes[self.input.0].value;
        let alpha = nodes[self.alpha.0].value.item();
        let need_strength = !matches!(self.info, CoeffInfo::Fixed);
        let need_input = nodes[self.input.0].requires_grad;
        let need_alpha = nodes[self.alpha.0].requires_grad;

        // Branch-major reduction. With the saturated normalization pinned to
        // exactly 1 its codes are 1 for every branch, so per branch
        //   dot_j = sum_e g * code_j(norm_e)
        // covers both regions, and the alpha gradient becomes
        //   sum_sat g + sum_j c_j * (dot_j - sum_e g * norm_e).
        let mut branch_dots = vec![0.0; self.levels.len()];
        let mut gx = if need_input { vec![0.0; x.numel()] } else { Vec::new() };
        let inv = 1.0 / alpha;
        let g_data = grad_out.data();
        let mut norm = vec![0.0; x.numel()];
        let mut sat_sum = 0.0;
        let mut norm_dot = 0.0;
        for (e, (&g, &xv)) in g_data.iter().zip(x.data()).enumerate() {
            let saturated = xv > alpha;
            let nv = if saturated { 1.0 } else { xv.max(0.0) * inv };
            norm[e] = nv;
            if saturated {
                sat_sum += g;
            }
            norm_dot += g * nv;
            if need_input {
                gx[e] = if (0.0..=alpha).contains(&xv) { g } else { 0.0 };
            }
        }
        let mut galpha = sat_sum;
        if need_strength || need_alpha {
            for (j, &lv) in self.levels.iter().enumerate() {
                let inv_lv = 1.0 / lv;
                let mut acc = [0.0f64; 4];
                let chunks = norm.len() / 4;
                for i in 0..chunks {
                    for lane in 0..4 {
                        let e = i * 4 + lane;
                        acc[lane] += g_data[e] * (lv * norm[e] + 0.5).floor();
                    }
                }
                let mut tail = 0.0;
                for e in chunks * 4..norm.len() {
                    tail += g_data[e] * (lv * norm[e] + 0.5).floor();
                }
                let dot_j = ((acc[0] + acc[1]) + (acc[2] + acc[3]) + tail) * inv_lv;
                branch_dots[j] = alpha * dot_j;
                galpha += self.coeffs[j] * (dot_j - norm_dot);
            }
        }
        if need_strength {
            if let Some((var, grad)) = strength_grad_from_branch_dots(&self.coeffs, &self.info, &branch_dots) {
                if nodes[var.0].requires_grad {
                    sink.add(var, grad);
                }
            }
        }
        if need_input {
            sink.add(self.input, Tensor::from_raw(x.shape().to_vec(), gx));
        }
        if need_alpha {
            sink.add(self.alpha, Tensor::scalar(galpha));
        }
    }
}

/// Aggregated activation quantization alpha * sum_i coeffs_i * X^i with
/// X^i = quantize(clip(x, 0, alpha)/alpha, b_i), one pass over the input.
pub fn quant_act_agg(
    tape: &mut Tape,
    input: VarId,
    alpha: VarId,
    bc: &BranchCoeffs,
    bits: &[u32],
    trace: Option<&std::cell::RefCell<QuantTrace>>,
) -> Result<VarId> {
    if bc.coeffs.len() != bits.len() {
        return Err(Error::ShapeMismatch {
            context: "quant_act_agg",
            detail: format!("{} coeffs vs {} bitwidths", bc.coeffs.len(), bits.len()),
        });
    }
    let alpha_v = tape.value(alpha).item();
    if alpha_v <= 0.0 {
        return Err(Error::Numeric(format!("clip parameter must stay positive, got {alpha_v}")));
    }
    let levels: Vec<f64> = bits.iter().map(|&b| crate::quantizer::levels(b)).collect();
    let x = tape.value(input);
    let mut data = vec![0.0; x.numel()];
    match trace {
        None => {
            // branch-major passes keep the per-element work independent and
            // vectorizable; the branch loop is the short one
            let inv = 1.0 / alpha_v;
            let mut normalized = vec![0.0; x.numel()];
            for (nv, &xv) in normalized.iter_mut().zip(x.data()) {
                *nv = if xv > alpha_v { 1.0 } else { xv.max(0.0) * inv };
            }
            for (&c, &lv) in bc.coeffs.iter().zip(&levels) {
                let scale = c * alpha_v / lv;
                for (o, &nv) in data.iter_mut().zip(&normalized) {
                    *o += scale * (lv * nv + 0.5).floor();
                }
            }
        }
        Some(tr) => {
            let mut tr = tr.borrow_mut();
            let replaying = tr.is_replay();
            for (o, &xv) in data.iter_mut().zip(x.data()) {
                let saturated = tr.mask(xv > alpha_v);
                // In replay the lower clip stays frozen open: inputs are
                // post-ReLU (>= 0 at the record point), and a frozen-mask
                // ReLU may legitimately push a replayed value slightly
                // negative.
                let normalized = if saturated {
                    1.0
                } else if replaying {
                    xv / alpha_v
                } else {
                    xv.max(0.0) / alpha_v
                };
                let mut acc = 0.0;
                for (&c, &lv) in bc.coeffs.iter().zip(&levels) {
                    let code = normalized
                        + tr.residual(|| {
                            quantize_grid_unchecked(normalized.clamp(0.0, 1.0), lv) - normalized
                        });
                    acc += c * code;
                }
                *o = alpha_v * acc;
            }
        }
    }
    let rg = tape.requires_grad(input)
        || tape.requires_grad(alpha)
        || match bc.info {
            CoeffInfo::Fixed => false,
            CoeffInfo::Softmax { strength } | CoeffInfo::Gumbel { strength, .. } => {
                tape.requires_grad(strength)
            }
        };
    tape.push(
        Tensor::from_raw(x.shape().to_vec(), data),
        rg,
        Box::new(ActAggOp {
            input,
            alpha,
            coeffs: bc.coeffs.clone(),
            info: bc.info.clone(),
            levels,
        }),
        "quant_act_agg",
    )
}

// ---------------------------------------------------------------------------
// reference supernet path (test oracle)
// ---------------------------------------------------------------------------

/// Supernet-style forward keeping one meta weight tensor per branch and
/// running one convolution per branch, then mixing the feature maps by
/// softmax(strengths). Kept as an equivalence and cost oracle only.
pub fn dnas_reference_forward(
    input: &Tensor,
    branch_weights: &[Tensor],
    strengths: &[f64],
    bits: &BitwidthSet,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if branch_weights.len() != bits.len() || strengths.len() != bits.len() {
        return Err(Error::ShapeMismatch {
            context: "dnas_reference_forward",
            detail: format!(
                "{} branch weights, {} strengths, {} bitwidths",
                branch_weights.len(),
                strengths.len(),
                bits.len()
            ),
        });
    }
    let coeffs = softmax_coeffs(strengths);
    let mut out: Option<Tensor> = None;
    for ((w, &b), &c) in branch_weights.iter().zip(bits.bits()).zip(&coeffs) {
        let quant = quantize_weights(w, b)?;
        let conv = crate::ops::conv2d_raw(input, &quant, stride, pad)?;
        let scaled = conv.scale(c);
        out = Some(match out {
            Some(acc) => acc.add(&scaled)?,
            None => scaled,
        });
    }
    Ok(out.unwrap())
}

// ---------------------------------------------------------------------------
// bilevel search loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchMode {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone)]
pub struct SearchHyper {
    pub lr_weights: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_strengths: f64,
    pub lambda: f64,
    pub flops_target_mflops: f64,
    pub mode: SearchMode,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub train_loss: f64,
    pub valid_loss: f64,
    pub expected_mflops: f64,
}

fn coeff_source(hyper: &SearchHyper) -> CoeffSource<'_> {
    match hyper.mode {
        SearchMode::Deterministic => CoeffSource::Deterministic,
        SearchMode::Stochastic => CoeffSource::Stochastic { tau: hyper.tau },
    }
}

/// One bilevel iteration: update network weights (and alpha, BN affine) on
/// the training batch, then update all strengths on the validation batch
/// with the FLOPs hinge penalty added to the validation loss.
pub fn search_step(
    net: &mut MixedPrecNet,
    train_batch: &Batch,
    valid_batch: &Batch,
    hyper: &SearchHyper,
    rng: &mut Rng,
) -> Result<StepStats> {
    // Lower level: weights on the training split.
    let cfg = ForwardCfg {
        coeffs: coeff_source(hyper),
        bn: BnStatsMode::TrainUpdate,
        trace: None,
    };
    let train_loss = net.backward_from_batch(train_batch, &cfg, rng)?;
    if !train_loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {train_loss}")));
    }
    net.sgd_step_weights(
        hyper.lr_weights,
        hyper.momentum,
        hyper.weight_decay,
        hyper.weight_decay,
    )?;

    // Upper level: strengths on the validation split, plus the cost penalty.
    let cfg = ForwardCfg {
        coeffs: coeff_source(hyper),
        bn: BnStatsMode::TrainFrozen,
        trace: None,
    };
    let valid_loss = net.backward_from_batch(valid_batch, &cfg, rng)?;
    if !valid_loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite validation loss {valid_loss}")));
    }
    let costs = net.layer_costs();
    let strengths = net.strengths();
    let expected_raw = costmodel::expected_flops(&costs, &strengths, net.bits())?;
    let expected_mflops = costmodel::to_mflops(expected_raw);
    if expected_mflops > hyper.flops_target_mflops {
        // d(lambda*(E/1e6 - target))/dr = lambda/1e6 * dE/dr
        let penalty_grads = costmodel::expected_flops_grad(&costs, &strengths, net.bits())?;
        net.add_strength_grads(&penalty_grads, hyper.lambda / 1e6)?;
    }
    net.adam_step_strengths(hyper.lr_strengths)?;

    Ok(StepStats { train_loss, valid_loss, expected_mflops })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_acc: f64,
    pub expected_mflops: f64,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct SearchRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_weights: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_strengths: f64,
    pub lambda: f64,
    pub flops_target_mflops: f64,
    pub mode: SearchMode,
    pub gumbel: GumbelConfig,
    pub seed: u64,
}

impl Default for SearchRunConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            lr_weights: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_strengths: 0.02,
            lambda: 0.06,
            flops_target_mflops: 1.0,
            mode: SearchMode::Deterministic,
            gumbel: GumbelConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub plan: NetworkPlan,
    pub history: Vec<HistoryRow>,
    pub best_strengths: Vec<(Vec<f64>, Vec<f64>)>,
    pub best_epoch: usize,
    pub best_valid_acc: f64,
}

/// Full search: alternating weight/strength updates over the dataset's
/// search train/valid halves, with best-epoch strengths checkpointed on
/// validation accuracy (ties prefer the later, more cost-refined epoch).
pub fn run_search(
    net: &mut MixedPrecNet,
    dataset: &crate::dataio::Dataset,
    cfg: &SearchRunConfig,
) -> Result<SearchOutcome> {
    let mut rng = Rng::new(cfg.seed ^ 0x5eed_5eed);
    let train_idx = dataset.split("train")?;
    let valid_idx = dataset.split("valid")?;
    let mut history = Vec::new();
    let mut best_strengths = net.strengths();
    let mut best_epoch = 0;
    let mut best_acc = -1.0;

    for epoch in 0..cfg.epochs {
        let tau = cfg.gumbel.tau_at(epoch, cfg.epochs);
        let hyper = SearchHyper {
            lr_weights: cosine_lr(cfg.lr_weights, epoch, cfg.epochs),
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            lr_strengths: cfg.lr_strengths,
            lambda: cfg.lambda,
            flops_target_mflops: cfg.flops_target_mflops,
            mode: cfg.mode,
            tau,
        };

        let mut train_order = train_idx.to_vec();
        let mut valid_order = valid_idx.to_vec();
        rng.shuffle(&mut train_order);
        rng.shuffle(&mut valid_order);
        let iters = (train_order.len() / cfg.batch_size).max(1).min(
            (valid_order.len() / cfg.batch_size).max(1),
        );

        let mut train_loss_sum = 0.0;
        let mut valid_loss_sum = 0.0;
        let mut expected = 0.0;
        for it in 0..iters {
            let tb = dataset.gather_batch(&train_order, it, cfg.batch_size)?;
            let vb = dataset.gather_batch(&valid_order, it, cfg.batch_size)?;
            let stats = search_step(net, &tb, &vb, &hyper, &mut rng)?;
            train_loss_sum += stats.train_loss;
            valid_loss_sum += stats.valid_loss;
            expected = stats.expected_mflops;
        }

        let valid_acc = net.evaluate_split(dataset, "valid", cfg.batch_size)?;
        if valid_acc >= best_acc {
            best_acc = valid_acc;
            best_epoch = epoch;
            best_strengths = net.strengths();
        }
        history.push(HistoryRow {
            epoch,
            train_loss: train_loss_sum / iters as f64,
            valid_loss: valid_loss_sum / iters as f64,
            valid_acc,
            expected_mflops: expected,
            tau,
        });
    }

    if cfg.epochs == 0 {
        best_strengths = net.strengths();
    }
    let plan = select_plan(&best_strengths, net.bits());
    Ok(SearchOutcome {
        plan,
        history,
        best_strengths,
        best_epoch,
        best_valid_acc: best_acc.max(0.0),
    })
}

/// Rejection-samples a plan with i.i.d. uniform bitwidths per layer side
/// until its FLOPs (same unit as `network_flops`) land inside [lo, hi].
pub fn sample_random_plan(
    layer_costs: &[LayerCost],
    bits: &BitwidthSet,
    flops_range: (f64, f64),
    rng: &mut Rng,
) -> Result<NetworkPlan> {
    let (lo, hi) = flops_range;
    if lo > hi {
        return Err(Error::InvalidArg(format!("empty FLOPs range [{lo}, {hi}]")));
    }
    let layers = layer_costs.iter().filter(|c| c.quantized).count();
    for _ in 0..10_000 {
        let pairs: Vec<(u32, u32)> = (0..layers)
            .map(|_| {
                (
                    bits.bits()[rng.below(bits.len())],
                    bits.bits()[rng.below(bits.len())],
                )
            })
            .collect();
        let plan = NetworkPlan::new(pairs);
        let flops = costmodel::network_flops(&plan, layer_costs)?;
        if flops >= lo && flops <= hi {
            return Ok(plan);
        }
    }
    Err(Error::Infeasible(format!(
        "no plan with FLOPs in [{lo}, {hi}] found in 10000 draws"
    )))
}
