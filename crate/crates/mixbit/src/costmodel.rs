//! Differentiable FLOPs accounting.
//!
//! Cost convention: one full-precision multiply-accumulate counts as 1 FLOP;
//! an M-bit x K-bit MAC counts as M*K/64. The first convolution and the
//! final dense layer stay full precision and pay their raw MAC count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::{softmax_coeffs, BitwidthSet, NetworkPlan};

/// Per-layer multiply-accumulate count plus whether the layer is quantized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub macs: f64,
    pub quantized: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub expected_mflops: f64,
    pub target_mflops: f64,
    pub penalty: f64,
    pub per_layer_mflops: Vec<f64>,
}

/// Operation count of one layer at effective bitwidths (M, K). Real-valued
/// in M and K so the strength-weighted expectation stays differentiable.
pub fn flop_pair(macs: f64, quantized: bool, m: f64, k: f64) -> f64 {
    if quantized {
        macs * m * k / 64.0
    } else {
        macs
    }
}

/// Effective (strength-weighted) bitwidth sum_i softmax(strengths)_i * b_i.
pub fn effective_bits(strengths: &[f64], bits: &BitwidthSet) -> f64 {
    let coeffs = softmax_coeffs(strengths);
    coeffs
        .iter()
        .zip(bits.bits())
        .map(|(&c, &b)| c * b as f64)
        .sum()
}

/// Expected network FLOPs under the current strength distributions.
/// `strengths` carries one (r, s) pair per quantized layer, in layer order.
pub fn expected_flops(
    layer_costs: &[LayerCost],
    strengths: &[(Vec<f64>, Vec<f64>)],
    bits: &BitwidthSet,
) -> Result<f64> {
    let quantized = layer_costs.iter().filter(|c| c.quantized).count();
    if quantized != strengths.len() {
        return Err(Error::ShapeMismatch {
            context: "expected_flops",
            detail: format!("{quantized} quantized layers vs {} strength pairs", strengths.len()),
        });
    }
    let mut total = 0.0;
    let mut idx = 0;
    for cost in layer_costs {
        if cost.quantized {
            let (r, s) = &strengths[idx];
            idx += 1;
            let m = effective_bits(r, bits);
            let k = effective_bits(s, bits);
            total += flop_pair(cost.macs, true, m, k);
        } else {
            total += cost.macs;
        }
    }
    Ok(total)
}

/// Analytic gradient of `expected_flops` with respect to every strength
/// entry; returns (d/dr, d/ds) pairs aligned with `strengths`.
pub fn expected_flops_grad(
    layer_costs: &[LayerCost],
    strengths: &[(Vec<f64>, Vec<f64>)],
    bits: &BitwidthSet,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let quantized: Vec<&LayerCost> = layer_costs.iter().filter(|c| c.quantized).collect();
    if quantized.len() != strengths.len() {
        return Err(Error::ShapeMismatch {
            context: "expected_flops_grad",
            detail: format!(
                "{} quantized layers vs {} strength pairs",
                quantized.len(),
                strengths.len()
            ),
        });
    }
    let b: Vec<f64> = bits.bits().iter().map(|&v| v as f64).collect();
    let mut grads = Vec::with_capacity(strengths.len());
    for (cost, (r, s)) in quantized.iter().zip(strengths) {
        let cr = softmax_coeffs(r);
        let cs = softmax_coeffs(s);
        let m: f64 = cr.iter().zip(&b).map(|(&c, &bv)| c * bv).sum();
        let k: f64 = cs.iter().zip(&b).map(|(&c, &bv)| c * bv).sum();
        // d(macs*M*K/64)/dr_j = macs*K/64 * c_j*(b_j - M), softmax Jacobian folded in
        let gr: Vec<f64> = cr
            .iter()
            .zip(&b)
            .map(|(&c, &bv)| cost.macs * k / 64.0 * c * (bv - m))
            .collect();
        let gs: Vec<f64> = cs
            .iter()
            .zip(&b)
            .map(|(&c, &bv)| cost.macs * m / 64.0 * c * (bv - k))
            .collect();
        grads.push((gr, gs));
    }
    Ok(grads)
}

/// FLOPs of a fixed plan. Plan entries align with the quantized layers in
/// order; the bypass sentinel (32) costs the raw MAC count.
pub fn network_flops(plan: &NetworkPlan, layer_costs: &[LayerCost]) -> Result<f64> {
    let quantized = layer_costs.iter().filter(|c| c.quantized).count();
    if plan.len() != quantized {
        return Err(Error::InvalidArg(format!(
            "plan covers {} layers but the network has {quantized} quantized layers",
            plan.len()
        )));
    }
    let mut total = 0.0;
    let mut idx = 0;
    for cost in layer_costs {
        if cost.quantized {
            let (bw, bx) = plan.pair(idx);
            idx += 1;
            if bw >= NetworkPlan::BYPASS_BITS || bx >= NetworkPlan::BYPASS_BITS {
                total += cost.macs;
            } else {
                total += flop_pair(cost.macs, true, bw as f64, bx as f64);
            }
        } else {
            total += cost.macs;
        }
    }
    Ok(total)
}

/// Hinge penalty lambda * max(0, expected - target); zero at equality.
pub fn flops_penalty(expected: f64, target: f64, lambda: f64) -> f64 {
    lambda * (expected - target).max(0.0)
}

pub fn to_mflops(flops: f64) -> f64 {
    flops / 1e6
}

/// Formats a MFLOPs value with 3 significant digits, the reporting convention.
pub fn format_mflops(mflops: f64) -> String {
    if mflops == 0.0 {
        return "0.00".to_string();
    }
    let digits = mflops.abs().log10().floor() as i32;
    let decimals = (2 - digits).max(0) as usize;
    format!("{:.*}", decimals, mflops)
}

pub fn cost_report(
    layer_costs: &[LayerCost],
    strengths: &[(Vec<f64>, Vec<f64>)],
    bits: &BitwidthSet,
    target_mflops: f64,
    lambda: f64,
) -> Result<CostReport> {
    let expected = to_mflops(expected_flops(layer_costs, strengths, bits)?);
    let mut per_layer = Vec::with_capacity(layer_costs.len());
    let mut idx = 0;
    for cost in layer_costs {
        let f = if cost.quantized {
            let (r, s) = &strengths[idx];
            idx += 1;
            flop_pair(
                cost.macs,
                true,
                effective_bits(r, bits),
                effective_bits(s, bits),
            )
        } else {
            cost.macs
        };
        per_layer.push(to_mflops(f));
    }
    Ok(CostReport {
        expected_mflops: expected,
        target_mflops,
        penalty: flops_penalty(expected, target_mflops, lambda),
        per_layer_mflops: per_layer,
    })
}
