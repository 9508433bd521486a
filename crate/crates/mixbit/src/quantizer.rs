//! Fixed-point quantization of weights and activations.
//!
//! Weights self-normalize through tanh onto the signed grid
//! {2k/(2^b-1) - 1}; activations clip to a learnable range [0, alpha] and
//! land on {alpha*k/(2^b-1)}. Rounding uses round-half-up, and gradients pass
//! through the rounding step via the straight-through estimator.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learnable clipping bound for one quantized activation site.
#[derive(Debug, Clone, Copy)]
pub struct ClipParam {
    pub alpha: f64,
}

/// Initial clipping value and the projection floor applied after optimizer steps.
pub const ALPHA_INIT: f64 = 6.0;
pub const ALPHA_MIN: f64 = 1e-3;

impl ClipParam {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha <= 0.0 {
            return Err(Error::InvalidArg(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { alpha })
    }
}

pub(crate) fn levels(bits: u32) -> f64 {
    ((1u64 << bits) - 1) as f64
}

/// round-half-up on the non-negative domain.
#[inline]
fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Rounds x in [0,1] onto the uniform grid {k/(2^b-1)}, de-quantize included.
pub fn quantize_grid(x: f64, bits: u32) -> Result<f64> {
    if bits < 1 {
        return Err(Error::InvalidArg("bitwidth must be >= 1".to_string()));
    }
    if !(-1e-9..=1.0 + 1e-9).contains(&x) {
        return Err(Error::InvalidArg(format!(
            "quantize_grid input {x} outside [0,1]"
        )));
    }
    Ok(quantize_grid_unchecked(x.clamp(0.0, 1.0), levels(bits)))
}

#[inline]
pub(crate) fn quantize_grid_unchecked(x: f64, levels: f64) -> f64 {
    round_half_up(levels * x) / levels
}

/// Sign-symmetric weight quantization onto [-1, 1]:
/// W_hat = 2*quantize(tanh(W) / (2 max|tanh W|) + 1/2) - 1.
/// An all-zero tensor maps to all zeros (the normalization is skipped).
pub fn quantize_weights(w: &Tensor, bits: u32) -> Result<Tensor> {
    if bits < 1 {
        return Err(Error::InvalidArg("bitwidth must be >= 1".to_string()));
    }
    let t = w.map(f64::tanh);
    let m = t.max_abs();
    if m == 0.0 {
        return Ok(Tensor::zeros(w.shape()));
    }
    let lv = levels(bits);
    let data = t
        .data()
        .iter()
        .map(|&tv| 2.0 * quantize_grid_unchecked(tv / (2.0 * m) + 0.5, lv) - 1.0)
        .collect();
    Ok(Tensor::from_raw(w.shape().to_vec(), data))
}

/// Clipped activation quantization onto {alpha * k/(2^b-1)}.
pub fn quantize_activations(x: &Tensor, alpha: f64, bits: u32) -> Result<Tensor> {
    if alpha <= 0.0 {
        return Err(Error::InvalidArg(format!("alpha must be positive, got {alpha}")));
    }
    if bits < 1 {
        return Err(Error::InvalidArg("bitwidth must be >= 1".to_string()));
    }
    let lv = levels(bits);
    let data = x
        .data()
        .iter()
        .map(|&v| alpha * quantize_grid_unchecked(v.clamp(0.0, alpha) / alpha, lv))
        .collect();
    Ok(Tensor::from_raw(x.shape().to_vec(), data))
}

/// Straight-through estimator: passes the upstream gradient where x <= alpha
/// and rectifies it to zero where x > alpha.
pub fn ste_backward(upstream: &Tensor, x: &Tensor, alpha: f64) -> Result<Tensor> {
    if !upstream.same_shape(x) {
        return Err(Error::ShapeMismatch {
            context: "ste_backward",
            detail: format!("{:?} vs {:?}", upstream.shape(), x.shape()),
        });
    }
    let data = upstream
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &xv)| if xv <= alpha { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_raw(x.shape().to_vec(), data))
}

/// STE approximation of d(quantized activations)/d(alpha), contracted with an
/// upstream gradient. Per element the local derivative is 1 in the saturated
/// region x > alpha and sum_i coeffs_i * (X^i - x/alpha) otherwise, with
/// X^i the normalized code quantize_grid(clip(x,0,alpha)/alpha, b_i).
pub fn alpha_gradient(
    x: &Tensor,
    alpha: f64,
    coeffs: &[f64],
    bits: &[u32],
    upstream: &Tensor,
) -> Result<f64> {
    if alpha <= 0.0 {
        return Err(Error::InvalidArg(format!("alpha must be positive, got {alpha}")));
    }
    if coeffs.len() != bits.len() {
        return Err(Error::ShapeMismatch {
            context: "alpha_gradient",
            detail: format!("{} coeffs vs {} bitwidths", coeffs.len(), bits.len()),
        });
    }
    if !upstream.same_shape(x) {
        return Err(Error::ShapeMismatch {
            context: "alpha_gradient",
            detail: format!("{:?} vs {:?}", upstream.shape(), x.shape()),
        });
    }
    let lv: Vec<f64> = bits.iter().map(|&b| levels(b)).collect();
    let mut total = 0.0;
    for (&xv, &g) in x.data().iter().zip(upstream.data()) {
        let local = if xv > alpha {
            1.0
        } else {
            let normalized = xv.clamp(0.0, alpha) / alpha;
            coeffs
                .iter()
                .zip(&lv)
                .map(|(&c, &l)| c * (quantize_grid_unchecked(normalized, l) - xv / alpha))
                .sum()
        };
        total += g * local;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Rounding-residual trace for finite-difference checks
// ---------------------------------------------------------------------------

/// Record/replay buffer that freezes the rounding residuals (and saturation
/// masks) of a forward pass. Replaying the same pass with perturbed
/// parameters yields the smooth surrogate whose exact derivative is the STE
/// gradient, which makes straight-through backward paths checkable by
/// central finite differences.
#[derive(Debug, Default)]
pub struct QuantTrace {
    residuals: Vec<f64>,
    masks: Vec<bool>,
    replay: bool,
    res_pos: usize,
    mask_pos: usize,
}

impl QuantTrace {
    pub fn recording() -> Self {
        Self::default()
    }

    /// Rewinds the buffers and switches to replay mode.
    pub fn start_replay(&mut self) {
        self.replay = true;
        self.res_pos = 0;
        self.mask_pos = 0;
    }

    pub fn is_replay(&self) -> bool {
        self.replay
    }

    pub fn rewind(&mut self) {
        self.res_pos = 0;
        self.mask_pos = 0;
    }

    #[inline]
    pub(crate) fn residual(&mut self, live: impl FnOnce() -> f64) -> f64 {
        if self.replay {
            let r = self.residuals[self.res_pos];
            self.res_pos += 1;
            r
        } else {
            let r = live();
            self.residuals.push(r);
            r
        }
    }

    #[inline]
    pub(crate) fn mask(&mut self, live: bool) -> bool {
        if self.replay {
            let m = self.masks[self.mask_pos];
            self.mask_pos += 1;
            m
        } else {
            self.masks.push(live);
            live
        }
    }
}
