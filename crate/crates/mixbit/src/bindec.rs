//! Binary decomposition: exact mixed-precision convolution on commodity CPUs.
//!
//! A layer with M-bit weights and K-bit activations lowers to (1) an im2col
//! matrix of activation codes, (2) bit-plane factorization of both operands,
//! (3) a binary GEMM where each output cell is a popcount over ANDed 64-bit
//! words, and (4) a stride-(M, K) windowed sum against the power-of-2 kernel
//! 2^(m+k). An affine correction maps the unsigned integer core back onto the
//! signed weight grid, and the layer's batch norm folds into a per-channel
//! scale/shift. The integer core is exact; only the final float scaling can
//! differ from the training path, by accumulation order alone.

use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::network::{LayerKind, LayerParams, MixedPrecNet, NetMode};
use crate::ops::ConvGeom;
use crate::search::NetworkPlan;
use crate::tensor::Tensor;

/// Kernel parallelism cap, read once from MIXBIT_THREADS.
pub fn kernel_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("MIXBIT_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or_else(|| {
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
            })
            .max(1)
    })
}

/// Native popcount.
#[inline]
pub fn popcount(word: u64) -> u32 {
    word.count_ones()
}

/// Portable nibble-table popcount; must agree with the native path exactly.
pub fn popcount_nibble(word: u64) -> u32 {
    const TABLE: [u8; 16] = [0, 1, 1, 2, 1, 2, 2, 3, 1, 2, 2, 3, 2, 3, 3, 4];
    let mut w = word;
    let mut total = 0u32;
    for _ in 0..16 {
        total += TABLE[(w & 0xf) as usize] as u32;
        w >>= 4;
    }
    total
}

// ---------------------------------------------------------------------------
// integer matrices and im2col
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
}

impl IntMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0; rows * cols] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.cols + c]
    }

    pub fn transposed(&self) -> IntMat {
        let mut out = IntMat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.at(r, c);
            }
        }
        out
    }

    pub fn matmul(&self, other: &IntMat) -> IntMat {
        assert_eq!(self.cols, other.rows);
        let mut out = IntMat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self.at(i, p);
                if a == 0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.at(p, j);
                }
            }
        }
        out
    }
}

/// Unrolls an NCHW input into per-image patch matrices [N, s, n] with
/// s = C*kH*kW; column j holds the receptive field of output position j, so
/// convolution becomes (c_o x s) times (s x n).
pub fn im2col(input: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            context: "im2col",
            detail: format!("expected NCHW, got {shape:?}"),
        });
    }
    let geom = ConvGeom::resolve(shape[1], shape[2], shape[3], kh, kw, stride, pad)?;
    let (s, n) = (geom.patch_len(), geom.cols());
    let img_len = shape[1] * shape[2] * shape[3];
    let mut out = vec![0.0; shape[0] * s * n];
    for img in 0..shape[0] {
        crate::ops::im2col_into(
            &input.data()[img * img_len..(img + 1) * img_len],
            &geom,
            &mut out[img * s * n..(img + 1) * s * n],
        );
    }
    Ok(Tensor::from_raw(vec![shape[0], s, n], out))
}

#[inline]
fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Integer codes of a quantized tensor. Signed (weight) grids map through
/// code = (w + 1)(2^b - 1)/2, unsigned (activation) grids through
/// code = x (2^b - 1)/alpha. Rows = first extent, cols = the rest.
pub fn to_codes(quantized: &Tensor, bits: u32, signed: bool, alpha: f64) -> Result<IntMat> {
    let lv = ((1u64 << bits) - 1) as f64;
    let rows = quantized.shape()[0];
    let cols = quantized.numel() / rows;
    let mut data = Vec::with_capacity(quantized.numel());
    for &v in quantized.data() {
        let raw = if signed { (v + 1.0) * lv / 2.0 } else { v * lv / alpha };
        let code = round_half_up(raw);
        let reconstructed = if signed { 2.0 * code / lv - 1.0 } else { alpha * code / lv };
        if (v - reconstructed).abs() > 1e-6 {
            return Err(Error::Numeric(format!(
                "value {v} is off the {bits}-bit grid (alpha = {alpha})"
            )));
        }
        if !(0.0..=lv).contains(&code) {
            return Err(Error::Numeric(format!("code {code} out of range 0..={lv}")));
        }
        data.push(code as i64);
    }
    Ok(IntMat { rows, cols, data })
}

// ---------------------------------------------------------------------------
// bit-plane packing
// ---------------------------------------------------------------------------

/// Packed binary bit-planes of an integer matrix. Source row r contributes
/// `bits_per_value` consecutive plane-rows, least significant bit first; each
/// plane-row packs `logical_cols` bits into 64-bit words with a zero tail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlaneMatrix {
    pub logical_rows: usize,
    pub logical_cols: usize,
    pub bits_per_value: u32,
    pub words_per_row: usize,
    packed: Vec<u64>,
}

impl BitPlaneMatrix {
    pub fn plane_rows(&self) -> usize {
        self.logical_rows * self.bits_per_value as usize
    }

    pub fn words(&self) -> &[u64] {
        &self.packed
    }

    pub fn row_words(&self, plane_row: usize) -> &[u64] {
        &self.packed[plane_row * self.words_per_row..(plane_row + 1) * self.words_per_row]
    }

    /// Plane bit (plane_row, col); used by tests and unpacking.
    pub fn bit(&self, plane_row: usize, col: usize) -> u8 {
        ((self.row_words(plane_row)[col / 64] >> (col % 64)) & 1) as u8
    }

    /// Expands to the dense {0,1} matrix (plane_rows x logical_cols).
    pub fn unpack(&self) -> IntMat {
        let mut out = IntMat::zeros(self.plane_rows(), self.logical_cols);
        for r in 0..self.plane_rows() {
            for c in 0..self.logical_cols {
                out.data[r * self.logical_cols + c] = self.bit(r, c) as i64;
            }
        }
        out
    }

    /// Packs a dense {0,1} matrix laid out like `unpack`'s output.
    pub fn pack_binary(binary: &IntMat, logical_rows: usize, bits_per_value: u32) -> Result<Self> {
        if binary.rows != logical_rows * bits_per_value as usize {
            return Err(Error::ShapeMismatch {
                context: "BitPlaneMatrix::pack_binary",
                detail: format!(
                    "{} plane rows vs {logical_rows} x {bits_per_value}",
                    binary.rows
                ),
            });
        }
        let words_per_row = binary.cols.div_ceil(64);
        let mut packed = vec![0u64; binary.rows * words_per_row];
        for r in 0..binary.rows {
            for c in 0..binary.cols {
                match binary.at(r, c) {
                    0 => {}
                    1 => packed[r * words_per_row + c / 64] |= 1u64 << (c % 64),
                    other => {
                        return Err(Error::Numeric(format!("non-binary entry {other}")));
                    }
                }
            }
        }
        Ok(Self {
            logical_rows,
            logical_cols: binary.cols,
            bits_per_value,
            words_per_row,
            packed,
        })
    }
}

/// Bit-plane factorization of an integer code matrix: plane-row r*b + m holds
/// bit m of source row r, so sum_m 2^m * plane_m reconstructs the codes.
pub fn decompose_bits(codes: &IntMat, bits: u32) -> Result<BitPlaneMatrix> {
    let limit = 1i64 << bits;
    let words_per_row = codes.cols.div_ceil(64);
    let mut packed = vec![0u64; codes.rows * bits as usize * words_per_row];
    for r in 0..codes.rows {
        for c in 0..codes.cols {
            let v = codes.at(r, c);
            if !(0..limit).contains(&v) {
                return Err(Error::Numeric(format!(
                    "code {v} out of range for {bits}-bit decomposition"
                )));
            }
            for m in 0..bits as usize {
                if (v >> m) & 1 == 1 {
                    let plane_row = r * bits as usize + m;
                    packed[plane_row * words_per_row + c / 64] |= 1u64 << (c % 64);
                }
            }
        }
    }
    Ok(BitPlaneMatrix {
        logical_rows: codes.rows,
        logical_cols: codes.cols,
        bits_per_value: bits,
        words_per_row,
        packed,
    })
}

// ---------------------------------------------------------------------------
// binary GEMM and recombination
// ---------------------------------------------------------------------------

/// P[i][j] = popcount(AND(plane-row i of the weights, plane-row j of the
/// transposed activations)). Both operands pack along the shared inner
/// extent, so each output cell streams contiguous words from both sides.
/// Output is the exact {0,1} matrix product (c_o*M) x (n*K).
pub fn binary_gemm(weights: &BitPlaneMatrix, acts_t: &BitPlaneMatrix) -> Result<IntMat> {
    if weights.logical_cols != acts_t.logical_cols {
        return Err(Error::ShapeMismatch {
            context: "binary_gemm",
            detail: format!(
                "inner extent {} vs {}",
                weights.logical_cols, acts_t.logical_cols
            ),
        });
    }
    let rows = weights.plane_rows();
    let cols = acts_t.plane_rows();
    let words = weights.words_per_row;
    let mut out = IntMat::zeros(rows, cols);

    let threads = kernel_threads().min(rows.max(1));
    if threads > 1 && rows >= 2 * threads && rows * cols * words > 1 << 16 {
        let chunk_rows = rows.div_ceil(threads);
        std::thread::scope(|scope| {
            for (t, out_chunk) in out.data.chunks_mut(chunk_rows * cols).enumerate() {
                let w = weights;
                let a = acts_t;
                scope.spawn(move || {
                    let row0 = t * chunk_rows;
                    for (local, out_row) in out_chunk.chunks_mut(cols).enumerate() {
                        gemm_row(w, a, row0 + local, out_row, words, cols);
                    }
                });
            }
        });
    } else {
        for i in 0..rows {
            gemm_row(weights, acts_t, i, &mut out.data[i * cols..(i + 1) * cols], words, cols);
        }
    }
    Ok(out)
}

#[inline]
fn gemm_row(
    weights: &BitPlaneMatrix,
    acts_t: &BitPlaneMatrix,
    i: usize,
    out_row: &mut [i64],
    words: usize,
    cols: usize,
) {
    let w_row = weights.row_words(i);
    for j in 0..cols {
        let a_row = acts_t.row_words(j);
        let mut acc = 0u32;
        for t in 0..words {
            acc += popcount(w_row[t] & a_row[t]);
        }
        out_row[j] = acc as i64;
    }
}

/// Power-of-2 recombination kernel for an (M, K) bit pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoeffSpec {
    pub m_bits: u32,
    pub k_bits: u32,
}

impl CoeffSpec {
    pub fn delta_w(&self) -> Vec<i64> {
        (0..self.m_bits).map(|m| 1i64 << m).collect()
    }

    pub fn delta_x(&self) -> Vec<i64> {
        (0..self.k_bits).map(|k| 1i64 << k).collect()
    }

    /// Kernel entry (m, k) = 2^(m+k).
    pub fn kernel(&self) -> IntMat {
        let mut out = IntMat::zeros(self.m_bits as usize, self.k_bits as usize);
        for m in 0..self.m_bits as usize {
            for k in 0..self.k_bits as usize {
                out.data[m * self.k_bits as usize + k] = 1i64 << (m + k);
            }
        }
        out
    }
}

/// Stride-(M, K) windowed sum of P against the 2^(m+k) kernel, implemented
/// with shift-adds: O[i][j] = sum_{m,k} P[iM+m][jK+k] << (m+k).
pub fn recombine(p: &IntMat, coeff: &CoeffSpec) -> Result<IntMat> {
    let (m_bits, k_bits) = (coeff.m_bits as usize, coeff.k_bits as usize);
    if p.rows % m_bits != 0 || p.cols % k_bits != 0 {
        return Err(Error::ShapeMismatch {
            context: "recombine",
            detail: format!(
                "P is {}x{}, not divisible by ({m_bits}, {k_bits})",
                p.rows, p.cols
            ),
        });
    }
    let rows = p.rows / m_bits;
    let cols = p.cols / k_bits;
    let mut out = IntMat::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0i64;
            for m in 0..m_bits {
                let row = &p.data[(i * m_bits + m) * p.cols..(i * m_bits + m + 1) * p.cols];
                for k in 0..k_bits {
                    acc += row[j * k_bits + k] << (m + k);
                }
            }
            out.data[i * cols + j] = acc;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// deployed layers
// ---------------------------------------------------------------------------

/// One exported mixed-precision convolution: packed weight code planes plus
/// the affine correction constants and the folded batch norm.
#[derive(Debug, Clone)]
pub struct BdLayer {
    pub out_c: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub coeff: CoeffSpec,
    pub alpha: f64,
    pub bn_scale: Vec<f64>,
    pub bn_shift: Vec<f64>,
    pub weight_planes: BitPlaneMatrix,
}

impl BdLayer {
    /// Signed-grid correction constants: w = wscale*code + woffset.
    pub fn weight_scale(&self) -> f64 {
        2.0 / (((1u64 << self.coeff.m_bits) - 1) as f64)
    }

    pub fn weight_offset(&self) -> f64 {
        -1.0
    }

    /// Activation de-quantization: x = xscale*code.
    pub fn act_scale(&self) -> f64 {
        self.alpha / (((1u64 << self.coeff.k_bits) - 1) as f64)
    }

    pub fn plane_bytes(&self) -> usize {
        self.weight_planes.plane_rows() * self.weight_planes.words_per_row * 8
    }

    /// Lowers a trained layer: quantize + encode weights, pack planes, fold
    /// the (frozen) batch norm into a per-channel scale/shift.
    #[allow(clippy::too_many_arguments)]
    pub fn from_trained(
        weight: &Tensor,
        m_bits: u32,
        alpha: f64,
        k_bits: u32,
        stride: usize,
        pad: usize,
        gamma: &[f64],
        beta: &[f64],
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Self> {
        let shape = weight.shape().to_vec();
        let quant = crate::quantizer::quantize_weights(weight, m_bits)?;
        let codes = to_codes(&quant, m_bits, true, 1.0)?;
        let weight_planes = decompose_bits(&codes, m_bits)?;
        let bn_scale: Vec<f64> = gamma
            .iter()
            .zip(running_var)
            .map(|(&g, &v)| g / (v + eps).sqrt())
            .collect();
        let bn_shift: Vec<f64> = beta
            .iter()
            .zip(running_mean)
            .zip(&bn_scale)
            .map(|((&b, &m), &s)| b - s * m)
            .collect();
        Ok(Self {
            out_c: shape[0],
            in_c: shape[1],
            kh: shape[2],
            kw: shape[3],
            stride,
            pad,
            coeff: CoeffSpec { m_bits, k_bits },
            alpha,
            bn_scale,
            bn_shift,
            weight_planes,
        })
    }

    /// Quantizes and encodes the input, runs the binary core, applies the
    /// affine correction and the folded batch norm. Equals the float
    /// fixed-plan conv+bn within float accumulation error.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != self.in_c {
            return Err(Error::ShapeMismatch {
                context: "BdLayer::forward",
                detail: format!("expected N x {} x H x W, got {shape:?}", self.in_c),
            });
        }
        let geom = ConvGeom::resolve(self.in_c, shape[2], shape[3], self.kh, self.kw, self.stride, self.pad)?;
        let (s, n) = (geom.patch_len(), geom.cols());
        let batch = shape[0];
        let k_levels = ((1u64 << self.coeff.k_bits) - 1) as f64;
        let wscale = self.weight_scale();
        let xscale = self.act_scale();
        let woffset = self.weight_offset();

        let cols = im2col(input, self.kh, self.kw, self.stride, self.pad)?;
        let mut out = vec![0.0; batch * self.out_c * n];
        for img in 0..batch {
            // encode activation patches to integer codes (s x n)
            let mut codes = IntMat::zeros(s, n);
            let col = &cols.data()[img * s * n..(img + 1) * s * n];
            for (dst, &v) in codes.data.iter_mut().zip(col) {
                *dst = round_half_up(v.clamp(0.0, self.alpha) / self.alpha * k_levels) as i64;
            }
            // per-column code sums for the signed-weight correction
            let mut colsum = vec![0i64; n];
            for r in 0..s {
                for j in 0..n {
                    colsum[j] += codes.at(r, j);
                }
            }
            let acts_t = decompose_bits(&codes.transposed(), self.coeff.k_bits)?;
            let p = binary_gemm(&self.weight_planes, &acts_t)?;
            let o = recombine(&p, &self.coeff)?;
            let out_img = &mut out[img * self.out_c * n..(img + 1) * self.out_c * n];
            for oc in 0..self.out_c {
                let (scale, shift) = (self.bn_scale[oc], self.bn_shift[oc]);
                for j in 0..n {
                    let conv = wscale * xscale * o.at(oc, j) as f64 + woffset * xscale * colsum[j] as f64;
                    out_img[oc * n + j] = scale * conv + shift;
                }
            }
        }
        Tensor::new(vec![batch, self.out_c, geom.out_h, geom.out_w], out)
    }
}

// ---------------------------------------------------------------------------
// whole-model export and inference
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BdModel {
    pub layers: Vec<BdLayer>,
}

/// Lowers every quantized convolution of a trained fixed-plan network.
/// Requires a fixed plan (search-mode nets cannot be exported) with no
/// bypass entries; batch norm folds from the frozen running statistics.
pub fn export_bd_model(net: &MixedPrecNet) -> Result<BdModel> {
    let NetMode::Fixed(plan) = &net.mode else {
        return Err(Error::InvalidArg(
            "binary decomposition requires a fixed-plan net; search-mode nets cannot be exported"
                .to_string(),
        ));
    };
    let mut layers = Vec::new();
    let mut qidx = 0usize;
    let all = net.layers();
    for (li, layer) in all.iter().enumerate() {
        let LayerKind::Conv { stride, pad, quantize: true, .. } = layer.spec.kind else {
            continue;
        };
        let LayerParams::Conv { weight, quant: Some(q) } = &layer.params else {
            unreachable!()
        };
        let (bw, bx) = plan.pair(qidx);
        qidx += 1;
        if bw >= NetworkPlan::BYPASS_BITS || bx >= NetworkPlan::BYPASS_BITS {
            return Err(Error::InvalidArg(format!(
                "layer {li} uses the full-precision bypass and cannot be lowered"
            )));
        }
        // the builder places each conv's batch norm immediately after it
        let Some(next) = all.get(li + 1) else {
            return Err(Error::InvalidArg(format!("quantized conv {li} has no following layer")));
        };
        let LayerParams::BatchNorm { gamma, beta, buffers } = &next.params else {
            return Err(Error::InvalidArg(format!(
                "quantized conv {li} is not followed by batch norm; cannot fold"
            )));
        };
        layers.push(BdLayer::from_trained(
            &weight.value,
            bw,
            q.alpha.value.item(),
            bx,
            stride,
            pad,
            gamma.value.data(),
            beta.value.data(),
            buffers.running_mean.data(),
            buffers.running_var.data(),
            1e-5,
        )?);
    }
    Ok(BdModel { layers })
}

/// Full-network inference with every quantized conv executed through its
/// BdLayer (batch norm folded) and the remaining layers in float eval mode.
pub fn bd_infer(net: &mut MixedPrecNet, bd: &BdModel, images: &Tensor) -> Result<Tensor> {
    let NetMode::Fixed(_) = &net.mode else {
        return Err(Error::InvalidArg("bd_infer requires a fixed-plan net".to_string()));
    };
    if bd.layers.len() != net.quantized_layer_count() {
        return Err(Error::InvalidArg(format!(
            "BD model has {} layers, network has {} quantized convs",
            bd.layers.len(),
            net.quantized_layer_count()
        )));
    }
    // Execute the graph directly on plain tensors.
    let layers = net.layers();
    let mut outputs: Vec<Tensor> = Vec::with_capacity(layers.len());
    let mut folded: Vec<bool> = vec![false; layers.len()];
    let mut qidx = 0usize;
    for (li, layer) in layers.iter().enumerate() {
        let input = match layer.spec.input {
            crate::network::InputRef::Prev => {
                if li == 0 {
                    images.clone()
                } else {
                    outputs[li - 1].clone()
                }
            }
            crate::network::InputRef::Node(i) => outputs[i].clone(),
        };
        let out = match &layer.spec.kind {
            LayerKind::Conv { quantize, stride, pad, .. } => {
                if *quantize {
                    folded[li] = true;
                    let out = bd.layers[qidx].forward(&input)?;
                    qidx += 1;
                    out
                } else {
                    let LayerParams::Conv { weight, .. } = &layer.params else { unreachable!() };
                    crate::ops::conv2d_raw(&input, &weight.value, *stride, *pad)?
                }
            }
            LayerKind::BatchNorm { .. } => {
                let src = match layer.spec.input {
                    crate::network::InputRef::Prev => li.checked_sub(1),
                    crate::network::InputRef::Node(i) => Some(i),
                };
                if src.map(|i| folded[i]).unwrap_or(false) {
                    // already applied inside the BD layer
                    folded[li] = true;
                    input
                } else {
                    let LayerParams::BatchNorm { gamma, beta, buffers } = &layer.params else {
                        unreachable!()
                    };
                    eval_batchnorm(&input, gamma.value.data(), beta.value.data(), buffers)
                }
            }
            LayerKind::Relu => input.map(|v| v.max(0.0)),
            LayerKind::GlobalAvgPool => {
                let (n, c, h, w) = (
                    input.shape()[0],
                    input.shape()[1],
                    input.shape()[2],
                    input.shape()[3],
                );
                let mut out = vec![0.0; n * c];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * h * w;
                        out[img * c + ch] =
                            input.data()[base..base + h * w].iter().sum::<f64>() / (h * w) as f64;
                    }
                }
                Tensor::from_raw(vec![n, c], out)
            }
            LayerKind::ResidualAdd { other } => input.add(&outputs[*other])?,
            LayerKind::Dense { .. } => {
                let LayerParams::Dense { weight, bias } = &layer.params else { unreachable!() };
                let (n, f) = (input.shape()[0], input.shape()[1]);
                let g = weight.value.shape()[0];
                let mut out = vec![0.0; n * g];
                crate::ops::matmul_abt_acc(input.data(), weight.value.data(), n, f, g, &mut out);
                for row in 0..n {
                    for j in 0..g {
                        out[row * g + j] += bias.value.data()[j];
                    }
                }
                Tensor::from_raw(vec![n, g], out)
            }
        };
        outputs.push(out);
    }
    Ok(outputs.pop().expect("network has layers"))
}

fn eval_batchnorm(input: &Tensor, gamma: &[f64], beta: &[f64], buffers: &crate::ops::BnBuffers) -> Tensor {
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let plane = h * w;
    let mut out = vec![0.0; input.numel()];
    for img in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] / (buffers.running_var.data()[ch] + 1e-5).sqrt();
            let shift = beta[ch] - scale * buffers.running_mean.data()[ch];
            let base = (img * c + ch) * plane;
            for i in 0..plane {
                out[base + i] = scale * input.data()[base + i] + shift;
            }
        }
    }
    Tensor::from_raw(input.shape().to_vec(), out)
}

// ---------------------------------------------------------------------------
// BD model file format
// ---------------------------------------------------------------------------

const BD_MAGIC: &[u8; 4] = b"MBBD";
const BD_VERSION: u16 = 1;

/// File layout: magic "MBBD", version u16, layer count u16; per layer a
/// geometry header (c_o, c_i, kH, kW, stride, pad, M, K as u16), alpha and
/// the folded BN scale/shift as f64 arrays, then the plane payload as u64
/// words in plane-row order. All multi-byte values little-endian.
pub fn save_bd_model(model: &BdModel, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(BD_MAGIC);
    bytes.extend_from_slice(&BD_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(model.layers.len() as u16).to_le_bytes());
    for layer in &model.layers {
        for v in [
            layer.out_c,
            layer.in_c,
            layer.kh,
            layer.kw,
            layer.stride,
            layer.pad,
            layer.coeff.m_bits as usize,
            layer.coeff.k_bits as usize,
        ] {
            bytes.extend_from_slice(&(v as u16).to_le_bytes());
        }
        bytes.extend_from_slice(&layer.alpha.to_le_bytes());
        for &v in layer.bn_scale.iter().chain(&layer.bn_shift) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &w in layer.weight_planes.words() {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_bd_model(path: &Path) -> Result<BdModel> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != BD_MAGIC {
        return Err(Error::Format("bad magic; not a BD model file".to_string()));
    }
    let version = cur.u16()?;
    if version != BD_VERSION {
        return Err(Error::Format(format!("unsupported BD model version {version}")));
    }
    let layer_count = cur.u16()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let out_c = cur.u16()? as usize;
        let in_c = cur.u16()? as usize;
        let kh = cur.u16()? as usize;
        let kw = cur.u16()? as usize;
        let stride = cur.u16()? as usize;
        let pad = cur.u16()? as usize;
        let m_bits = cur.u16()? as u32;
        let k_bits = cur.u16()? as u32;
        let alpha = cur.f64()?;
        let bn_scale: Vec<f64> = (0..out_c).map(|_| cur.f64()).collect::<Result<_>>()?;
        let bn_shift: Vec<f64> = (0..out_c).map(|_| cur.f64()).collect::<Result<_>>()?;
        let s = in_c * kh * kw;
        let words_per_row = s.div_ceil(64);
        let n_words = out_c * m_bits as usize * words_per_row;
        let mut packed = Vec::with_capacity(n_words);
        for _ in 0..n_words {
            packed.push(cur.u64()?);
        }
        layers.push(BdLayer {
            out_c,
            in_c,
            kh,
            kw,
            stride,
            pad,
            coeff: CoeffSpec { m_bits, k_bits },
            alpha,
            bn_scale,
            bn_shift,
            weight_planes: BitPlaneMatrix {
                logical_rows: out_c,
                logical_cols: s,
                bits_per_value: m_bits,
                words_per_row,
                packed,
            },
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "trailing bytes in BD model file: {} of {}",
            bytes.len() - cur.pos,
            bytes.len()
        )));
    }
    Ok(BdModel { layers })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("BD model file truncated".to_string()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

// ---------------------------------------------------------------------------
// kernel benchmarking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct BenchResult {
    pub ns_per_call: f64,
    pub and_word_ops: u64,
    pub shift_adds: u64,
}

/// Times the packed binary GEMM plus recombination for a conv layer shape
/// (c_i -> c_o, k x k kernel on an h x w input) at the given bit pair.
/// Reports the minimum over `reps` calls and the closed-form op counts.
#[allow(clippy::too_many_arguments)]
pub fn bench_kernel(
    in_c: usize,
    out_c: usize,
    k: usize,
    h: usize,
    w: usize,
    stride: usize,
    pad: usize,
    m_bits: u32,
    k_bits: u32,
    reps: usize,
) -> Result<BenchResult> {
    if reps < 10 {
        return Err(Error::InvalidArg("bench needs at least 10 reps".to_string()));
    }
    let geom = ConvGeom::resolve(in_c, h, w, k, k, stride, pad)?;
    let (s, n) = (geom.patch_len(), geom.cols());
    let mut rng = crate::rng::Rng::new(0xbe7c);
    let mut w_codes = IntMat::zeros(out_c, s);
    for v in w_codes.data.iter_mut() {
        *v = rng.below(1 << m_bits) as i64;
    }
    let mut x_codes = IntMat::zeros(n, s); // transposed activation codes
    for v in x_codes.data.iter_mut() {
        *v = rng.below(1 << k_bits) as i64;
    }
    let bw = decompose_bits(&w_codes, m_bits)?;
    let bx = decompose_bits(&x_codes, k_bits)?;
    let coeff = CoeffSpec { m_bits, k_bits };

    let mut best = f64::INFINITY;
    let mut sink = 0i64;
    for _ in 0..reps {
        let start = std::time::Instant::now();
        let p = binary_gemm(&bw, &bx)?;
        let o = recombine(&p, &coeff)?;
        let elapsed = start.elapsed().as_nanos() as f64;
        sink ^= o.data[0];
        best = best.min(elapsed);
    }
    std::hint::black_box(sink);

    let words = s.div_ceil(64) as u64;
    Ok(BenchResult {
        ns_per_call: best,
        and_word_ops: words * (out_c as u64 * m_bits as u64) * (n as u64 * k_bits as u64),
        shift_adds: out_c as u64 * n as u64 * m_bits as u64 * k_bits as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{quantize_activations, quantize_weights};
    use crate::rng::Rng;

    #[test]
    fn popcount_paths_agree() {
        let mut rng = Rng::new(61);
        for _ in 0..10_000 {
            let w = rng.next_u64();
            assert_eq!(popcount(w), popcount_nibble(w));
        }
        assert_eq!(popcount_nibble(0), 0);
        assert_eq!(popcount_nibble(u64::MAX), 64);
    }

    #[test]
    fn im2col_identity_layouts() {
        let mut rng = Rng::new(62);
        // 1x1 kernel: channel x pixels reshape
        let input = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng);
        let cols = im2col(&input, 1, 1, 1, 0).unwrap();
        assert_eq!(cols.shape(), &[1, 3, 16]);
        assert_eq!(cols.data(), input.data());

        // full-size kernel: single column = flattened input
        let input = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut rng);
        let cols = im2col(&input, 3, 3, 1, 0).unwrap();
        assert_eq!(cols.shape(), &[1, 9, 1]);
        assert_eq!(cols.data(), input.data());
    }

    #[test]
    fn im2col_matmul_equals_direct_conv() {
        let mut rng = Rng::new(63);
        let input = Tensor::randn(&[2, 3, 7, 6], 1.0, &mut rng);
        let weight = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let direct = crate::ops::conv2d_raw(&input, &weight, 2, 1).unwrap();
        let cols = im2col(&input, 3, 3, 2, 1).unwrap();
        let (s, n) = (cols.shape()[1], cols.shape()[2]);
        for img in 0..2 {
            for oc in 0..4 {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..s {
                        acc += weight.data()[oc * s + p] * cols.data()[(img * s + p) * n + j];
                    }
                    let got = direct.data()[(img * 4 + oc) * n + j];
                    assert!((acc - got).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn codes_for_weight_and_activation_grids() {
        // endpoints
        let w = Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap();
        for b in 1..=5 {
            let codes = to_codes(&w, b, true, 1.0).unwrap();
            assert_eq!(codes.data, vec![0, (1 << b) - 1]);
        }
        // w_hat = 1/3 at b=2 -> code 2
        let w = Tensor::new(vec![1], vec![1.0 / 3.0]).unwrap();
        assert_eq!(to_codes(&w, 2, true, 1.0).unwrap().data, vec![2]);
        // activation 0.6 with alpha 0.6, b=1 -> code 1
        let x = Tensor::new(vec![1], vec![0.6]).unwrap();
        assert_eq!(to_codes(&x, 1, false, 0.6).unwrap().data, vec![1]);
        // off-grid is an error
        let bad = Tensor::new(vec![1], vec![0.4]).unwrap();
        assert!(to_codes(&bad, 1, true, 1.0).is_err());
    }

    #[test]
    fn decompose_matches_binary_expansion() {
        let codes = IntMat { rows: 2, cols: 3, data: vec![1, 2, 3, 0, 1, 2] };
        let planes = decompose_bits(&codes, 2).unwrap();
        let dense = planes.unpack();
        assert_eq!(dense.data, vec![1, 0, 1, 0, 1, 1, 0, 1, 0, 0, 0, 1]);

        // reconstruction
        for r in 0..2 {
            for c in 0..3 {
                let mut v = 0i64;
                for m in 0..2 {
                    v += (planes.bit(r * 2 + m, c) as i64) << m;
                }
                assert_eq!(v, codes.at(r, c));
            }
        }

        // zero matrix and b=1 identity
        let zeros = IntMat::zeros(3, 5);
        assert!(decompose_bits(&zeros, 3).unwrap().words().iter().all(|&w| w == 0));
        let codes = IntMat { rows: 2, cols: 2, data: vec![1, 0, 0, 1] };
        assert_eq!(decompose_bits(&codes, 1).unwrap().unpack().data, codes.data);

        // out-of-range code
        let bad = IntMat { rows: 1, cols: 1, data: vec![4] };
        assert!(decompose_bits(&bad, 2).is_err());
    }

    #[test]
    fn unpack_repack_identity() {
        let mut rng = Rng::new(64);
        for &cols in &[1usize, 63, 64, 65, 130] {
            let mut codes = IntMat::zeros(3, cols);
            for v in codes.data.iter_mut() {
                *v = rng.below(8) as i64;
            }
            let planes = decompose_bits(&codes, 3).unwrap();
            let repacked = BitPlaneMatrix::pack_binary(&planes.unpack(), 3, 3).unwrap();
            assert_eq!(planes, repacked);
            // padding bits are zero
            for pr in 0..planes.plane_rows() {
                let last = planes.row_words(pr)[planes.words_per_row - 1];
                let used = cols % 64;
                if used != 0 {
                    assert_eq!(last >> used, 0, "padding bits must stay zero");
                }
            }
        }
    }

    #[test]
    fn two_by_three_bit_pair_worked_example() {
        // W codes [[1,2,3],[0,1,2]] (M=2) against column codes [1,2,3] (K=2)
        let w_codes = IntMat { rows: 2, cols: 3, data: vec![1, 2, 3, 0, 1, 2] };
        let x_codes = IntMat { rows: 3, cols: 1, data: vec![1, 2, 3] };
        let bw = decompose_bits(&w_codes, 2).unwrap();
        let bx = decompose_bits(&x_codes.transposed(), 2).unwrap();
        let p = binary_gemm(&bw, &bx).unwrap();
        assert_eq!(p.rows, 4);
        assert_eq!(p.cols, 2);
        assert_eq!(p.data, vec![2, 1, 1, 2, 0, 1, 1, 1]);

        let o = recombine(&p, &CoeffSpec { m_bits: 2, k_bits: 2 }).unwrap();
        assert_eq!(o.data, vec![14, 8]);
        assert_eq!(w_codes.matmul(&x_codes).data, vec![14, 8]);
    }

    #[test]
    fn recombine_scalar_block_and_identity() {
        let p = IntMat { rows: 2, cols: 2, data: vec![2, 1, 1, 2] };
        let o = recombine(&p, &CoeffSpec { m_bits: 2, k_bits: 2 }).unwrap();
        assert_eq!(o.data, vec![14]);

        let p = IntMat { rows: 3, cols: 4, data: (0..12).collect() };
        let o = recombine(&p, &CoeffSpec { m_bits: 1, k_bits: 1 }).unwrap();
        assert_eq!(o.data, p.data);

        // divisibility violation
        let p = IntMat::zeros(3, 3);
        assert!(recombine(&p, &CoeffSpec { m_bits: 2, k_bits: 1 }).is_err());
    }

    #[test]
    fn coeff_kernel_is_outer_product_of_deltas() {
        let c = CoeffSpec { m_bits: 3, k_bits: 2 };
        assert_eq!(c.delta_w(), vec![1, 2, 4]);
        assert_eq!(c.delta_x(), vec![1, 2]);
        let k = c.kernel();
        for m in 0..3 {
            for kk in 0..2 {
                assert_eq!(k.at(m, kk), 1i64 << (m + kk));
            }
        }
    }

    #[test]
    fn binary_core_exact_across_word_boundaries() {
        let mut rng = Rng::new(65);
        for &s in &[1usize, 63, 64, 65, 128] {
            for (m, k) in [(1u32, 1u32), (2, 3), (5, 5)] {
                let co = 3;
                let n = 4;
                let mut w_codes = IntMat::zeros(co, s);
                for v in w_codes.data.iter_mut() {
                    *v = rng.below(1 << m) as i64;
                }
                let mut x_codes = IntMat::zeros(s, n);
                for v in x_codes.data.iter_mut() {
                    *v = rng.below(1 << k) as i64;
                }
                let bw = decompose_bits(&w_codes, m).unwrap();
                let bx = decompose_bits(&x_codes.transposed(), k).unwrap();
                let p = binary_gemm(&bw, &bx).unwrap();
                let o = recombine(&p, &CoeffSpec { m_bits: m, k_bits: k }).unwrap();
                let direct = w_codes.matmul(&x_codes);
                assert_eq!(o.data, direct.data, "s={s} m={m} k={k}");
            }
        }
    }

    #[test]
    fn binary_gemm_rejects_extent_mismatch() {
        let a = decompose_bits(&IntMat::zeros(2, 5), 1).unwrap();
        let b = decompose_bits(&IntMat::zeros(2, 6), 1).unwrap();
        assert!(binary_gemm(&a, &b).is_err());
    }

    fn reference_fixed_layer(
        input: &Tensor,
        weight: &Tensor,
        m_bits: u32,
        alpha: f64,
        k_bits: u32,
        stride: usize,
        pad: usize,
        bn_scale: &[f64],
        bn_shift: &[f64],
    ) -> Tensor {
        let xq = quantize_activations(input, alpha, k_bits).unwrap();
        let wq = quantize_weights(weight, m_bits).unwrap();
        let conv = crate::ops::conv2d_raw(&xq, &wq, stride, pad).unwrap();
        let (n, c, h, w) = (
            conv.shape()[0],
            conv.shape()[1],
            conv.shape()[2],
            conv.shape()[3],
        );
        let mut out = conv.data().to_vec();
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                for i in 0..h * w {
                    out[base + i] = bn_scale[ch] * out[base + i] + bn_shift[ch];
                }
            }
        }
        Tensor::from_raw(conv.shape().to_vec(), out)
    }

    #[test]
    fn bd_layer_matches_float_fixed_layer() {
        let mut rng = Rng::new(66);
        for trial in 0..20 {
            let m_bits = 1 + (trial % 5) as u32;
            let k_bits = 1 + ((trial / 5) % 5) as u32;
            let alpha = 0.5 + rng.next_f64();
            let weight = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
            let input = Tensor::from_raw(
                vec![2, 3, 6, 6],
                (0..2 * 3 * 36).map(|_| rng.next_f64() * 1.5 * alpha).collect(),
            );
            let gamma: Vec<f64> = (0..4).map(|_| 0.5 + rng.next_f64()).collect();
            let beta: Vec<f64> = (0..4).map(|_| rng.normal() * 0.1).collect();
            let mean: Vec<f64> = (0..4).map(|_| rng.normal() * 0.1).collect();
            let var: Vec<f64> = (0..4).map(|_| 0.5 + rng.next_f64()).collect();

            let layer = BdLayer::from_trained(
                &weight, m_bits, alpha, k_bits, 1, 1, &gamma, &beta, &mean, &var, 1e-5,
            )
            .unwrap();
            let got = layer.forward(&input).unwrap();
            let bn_scale: Vec<f64> = gamma
                .iter()
                .zip(&var)
                .map(|(&g, &v)| g / (v + 1e-5).sqrt())
                .collect();
            let bn_shift: Vec<f64> = beta
                .iter()
                .zip(&mean)
                .zip(&bn_scale)
                .map(|((&b, &m), &s)| b - s * m)
                .collect();
            let want = reference_fixed_layer(
                &input, &weight, m_bits, alpha, k_bits, 1, 1, &bn_scale, &bn_shift,
            );
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-4, "m={m_bits} k={k_bits}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn bench_counts_follow_closed_forms() {
        let r11 = bench_kernel(8, 8, 3, 8, 8, 1, 1, 1, 1, 10).unwrap();
        let r12 = bench_kernel(8, 8, 3, 8, 8, 1, 1, 1, 2, 10).unwrap();
        let r22 = bench_kernel(8, 8, 3, 8, 8, 1, 1, 2, 2, 10).unwrap();
        assert_eq!(r12.and_word_ops, 2 * r11.and_word_ops);
        assert_eq!(r22.and_word_ops, 4 * r11.and_word_ops);
        assert_eq!(r22.shift_adds, 4 * r11.shift_adds);
        assert!(r11.ns_per_call > 0.0);
    }

    #[test]
    fn bd_model_file_round_trip() {
        let mut rng = Rng::new(67);
        let weight = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let gamma = vec![1.0; 4];
        let beta = vec![0.0; 4];
        let mean = vec![0.0; 4];
        let var = vec![1.0; 4];
        let layer =
            BdLayer::from_trained(&weight, 3, 1.2, 2, 1, 1, &gamma, &beta, &mean, &var, 1e-5)
                .unwrap();
        let model = BdModel { layers: vec![layer] };

        let path = std::env::temp_dir().join(format!("mixbit_bd_{}.bd", std::process::id()));
        save_bd_model(&model, &path).unwrap();
        let loaded = load_bd_model(&path).unwrap();

        let input = Tensor::from_raw(
            vec![1, 3, 5, 5],
            (0..75).map(|_| rng.next_f64() * 1.4).collect(),
        );
        let a = model.layers[0].forward(&input).unwrap();
        let b = loaded.layers[0].forward(&input).unwrap();
        assert_eq!(a.data(), b.data());

        // plane bytes match the closed form; metadata beyond the parameter
        // arrays is just the fixed header
        let file_len = std::fs::metadata(&path).unwrap().len() as usize;
        let plane_bytes = model.layers[0].plane_bytes();
        assert_eq!(plane_bytes, (3 * 9usize).div_ceil(64) * 8 * 4 * 3);
        let param_bytes = 8 * (1 + 4 + 4);
        let header_bytes = 4 + 2 + 2 + 16;
        assert_eq!(file_len, header_bytes + param_bytes + plane_bytes);

        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn export_requires_fixed_plan() {
        let net = crate::network::build_tinynet(4, crate::search::BitwidthSet::default(), 3).unwrap();
        assert!(export_bd_model(&net).is_err());
    }
}
