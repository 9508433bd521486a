//! Differentiable tensor operations recorded on the tape.
//!
//! All reductions run in a fixed row-major sequential order so that repeated
//! runs with the same seed are bit-identical. Convolution is lowered through
//! im2col and three small matmul kernels; the backward passes recompute the
//! column buffers instead of storing them.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tape::{GradSink, Node, Tape, TapeOp, VarId};
use crate::tensor::Tensor;

thread_local! {
    static CONV_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of convolution invocations on this thread since the last reset.
pub fn conv_call_count() -> u64 {
    CONV_CALLS.with(|c| c.get())
}

pub fn reset_conv_call_count() {
    CONV_CALLS.with(|c| c.set(0));
}

fn note_conv_call() {
    CONV_CALLS.with(|c| c.set(c.get() + 1));
}

// ---------------------------------------------------------------------------
// matmul kernels (row-major, accumulate into c)
// ---------------------------------------------------------------------------

// Column-block width: keeps the streamed operand panels inside L2 while the
// innermost loops stay straight-line and auto-vectorizable. Reduction order
// within each output element is sequential over p, so results do not depend
// on the blocking.
const COL_BLOCK: usize = 512;

/// c[m x n] += a[m x k] * b[k x n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut jc = 0;
    while jc < n {
        let je = (jc + COL_BLOCK).min(n);
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let c_row = &mut c[i * n + jc..i * n + je];
            for (p, &a_ip) in a_row.iter().enumerate() {
                if a_ip == 0.0 {
                    continue;
                }
                let b_row = &b[p * n + jc..p * n + je];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += a_ip * bv;
                }
            }
        }
        jc = je;
    }
}

/// Fixed-tree dot product: sixteen interleaved partial sums break the add
/// latency chain; the lane layout is fixed, so results are deterministic.
#[inline]
fn dot16(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 16;
    let chunks = a.len() / LANES;
    let mut acc = [0.0f64; LANES];
    for i in 0..chunks {
        let (av, bv) = (&a[i * LANES..(i + 1) * LANES], &b[i * LANES..(i + 1) * LANES]);
        for lane in 0..LANES {
            acc[lane] += av[lane] * bv[lane];
        }
    }
    let mut tail = 0.0;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let mut total = 0.0;
    for lane in 0..LANES {
        total += acc[lane];
    }
    total + tail
}

/// c[m x n] += a[m x k] * b[n x k]^T
pub(crate) fn matmul_abt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            *cv += dot16(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// c[k x n] += a[m x k]^T * b[m x n]
pub(crate) fn matmul_atb_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let mut jc = 0;
    while jc < n {
        let je = (jc + COL_BLOCK).min(n);
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let b_row = &b[i * n + jc..i * n + je];
            for (p, &a_ip) in a_row.iter().enumerate() {
                if a_ip == 0.0 {
                    continue;
                }
                let c_row = &mut c[p * n + jc..p * n + je];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += a_ip * bv;
                }
            }
        }
        jc = je;
    }
}

// ---------------------------------------------------------------------------
// convolution lowering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn resolve(
        channels: usize,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride < 1 {
            return Err(Error::InvalidArg("conv stride must be >= 1".to_string()));
        }
        if in_h + 2 * pad < kh || in_w + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                context: "conv geometry",
                detail: format!(
                    "kernel {kh}x{kw} does not fit input {in_h}x{in_w} with pad {pad}"
                ),
            });
        }
        let out_h = (in_h + 2 * pad - kh) / stride + 1;
        let out_w = (in_w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            channels,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unrolls one image (C x H x W slice) into a patch matrix [s x n] where
/// s = C*kh*kw and column j holds the receptive field of output position j.
pub(crate) fn im2col_into(image: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let n = g.cols();
    debug_assert_eq!(col.len(), g.patch_len() * n);
    debug_assert_eq!(image.len(), g.channels * g.in_h * g.in_w);
    for c in 0..g.channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for kh in 0..g.kh {
            for kw in 0..g.kw {
                let row = (c * g.kh + kh) * g.kw + kw;
                let dst = &mut col[row * n..(row + 1) * n];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    let dst_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.in_h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        dst_row[ow] = if iw < 0 || iw >= g.in_w as isize {
                            0.0
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Accumulates a patch-matrix gradient back onto one image. Gather form:
/// each input pixel sums the gcol entries of every kernel window covering
/// it, so writes stay sequential.
fn col2im_acc(gcol: &[f64], g: &ConvGeom, image_grad: &mut [f64]) {
    let n = g.cols();
    for c in 0..g.channels {
        let plane = &mut image_grad[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ih in 0..g.in_h {
            for iw in 0..g.in_w {
                let mut acc = 0.0;
                for kh in 0..g.kh {
                    let oh_num = ih + g.pad;
                    if oh_num < kh {
                        continue;
                    }
                    let oh_off = oh_num - kh;
                    if oh_off % g.stride != 0 {
                        continue;
                    }
                    let oh = oh_off / g.stride;
                    if oh >= g.out_h {
                        continue;
                    }
                    for kw in 0..g.kw {
                        let ow_num = iw + g.pad;
                        if ow_num < kw {
                            continue;
                        }
                        let ow_off = ow_num - kw;
                        if ow_off % g.stride != 0 {
                            continue;
                        }
                        let ow = ow_off / g.stride;
                        if ow >= g.out_w {
                            continue;
                        }
                        let row = (c * g.kh + kh) * g.kw + kw;
                        acc += gcol[row * n + oh * g.out_w + ow];
                    }
                }
                plane[ih * g.in_w + iw] += acc;
            }
        }
    }
}

/// im2col over the whole batch: col[(s) x (batch*n)] with image-major columns.
fn im2col_batch(input: &Tensor, g: &ConvGeom) -> Vec<f64> {
    let batch = input.shape()[0];
    let s = g.patch_len();
    let n = g.cols();
    let img_len = g.channels * g.in_h * g.in_w;
    let total = batch * n;
    let mut col = vec![0.0; s * total];
    let mut img_col = vec![0.0; s * n];
    for img in 0..batch {
        im2col_into(&input.data()[img * img_len..(img + 1) * img_len], g, &mut img_col);
        for row in 0..s {
            col[row * total + img * n..row * total + (img + 1) * n]
                .copy_from_slice(&img_col[row * n..(row + 1) * n]);
        }
    }
    col
}

/// [c_o x (batch*n)] channel-major result back to NCHW order.
fn scatter_batch_major(src: &[f64], batch: usize, out_c: usize, n: usize, dst: &mut [f64]) {
    let total = batch * n;
    for oc in 0..out_c {
        for img in 0..batch {
            dst[(img * out_c + oc) * n..(img * out_c + oc + 1) * n]
                .copy_from_slice(&src[oc * total + img * n..oc * total + (img + 1) * n]);
        }
    }
}

/// NCHW-ordered gradient to channel-major [c_o x (batch*n)].
fn gather_batch_major(src: &[f64], batch: usize, out_c: usize, n: usize) -> Vec<f64> {
    let total = batch * n;
    let mut dst = vec![0.0; out_c * total];
    for img in 0..batch {
        for oc in 0..out_c {
            dst[oc * total + img * n..oc * total + (img + 1) * n]
                .copy_from_slice(&src[(img * out_c + oc) * n..(img * out_c + oc + 1) * n]);
        }
    }
    dst
}

fn conv_forward_raw_cols(
    input: &Tensor,
    weight: &Tensor,
    g: &ConvGeom,
    out_c: usize,
) -> (Tensor, Vec<f64>) {
    note_conv_call();
    let batch = input.shape()[0];
    let s = g.patch_len();
    let n = g.cols();
    let col = im2col_batch(input, g);
    let total = batch * n;
    let mut prod = vec![0.0; out_c * total];
    matmul_acc(weight.data(), &col, out_c, s, total, &mut prod);
    let mut out = vec![0.0; batch * out_c * n];
    scatter_batch_major(&prod, batch, out_c, n, &mut out);
    (Tensor::from_raw(vec![batch, out_c, g.out_h, g.out_w], out), col)
}

fn conv_forward_raw(input: &Tensor, weight: &Tensor, g: &ConvGeom, out_c: usize) -> Tensor {
    conv_forward_raw_cols(input, weight, g, out_c).0
}

struct Conv2dOp {
    input: VarId,
    weight: VarId,
    geom: ConvGeom,
    out_c: usize,
    /// Patch matrix from the forward pass, reused by the weight gradient.
    col: Vec<f64>,
}

impl TapeOp for Conv2dOp {
    fn backward(&self, grad_out: &Tensor, nodes: &[Node], sink: &mut GradSink) {
        let input = &nodes[self.input.0].value;
        let weight = &nodes[self.weight.0].value;
        let g = &self.geom;
        let batch = input.shape()[0];
        let s = g.patch_len();
        let n = g.cols();
        let total = batch * n;
        let img_len = g.channels * g.in_h * g.in_w;
        let need_input = nodes[self.input.0].requires_grad;
        let need_weight = nodes[self.weight.0].requires_grad;

        let gout = gather_batch_major(grad_out.data(), batch, self.out_c, n);
        if need_weight {
            let mut gw = vec![0.0; self.out_c * s];
            matmul_abt_acc(&gout, &self.col, self.out_c, total, s, &mut gw);
            sink.add(self.weight, Tensor::from_raw(weight.shape().to_vec(), gw));
        }
        if need_input {
            let mut gcol = vec![0.0; s * total];
            matmul_atb_acc(weight.data(), &gout, self.out_c, s, total, &mut gcol);
            let mut gx = vec![0.0; input.numel()];
            let mut img_col = vec![0.0; s * n];
            for img in 0..batch {
                for row in 0..s {
                    img_col[row * n..(row + 1) * n]
                        .copy_from_slice(&gcol[row * total + img * n..row * total + (img + 1) * n]);
                }
                col2im_acc(&img_col, g, &mut gx[img * img_len..(img + 1) * img_len]);
            }
            sink.add(self.input, Tensor::from_raw(input.shape().to_vec(), gx));
        }
    }
}

/// 2D cross-correlation of an NCHW input with an OIHW weight (no kernel flip).
pub fn conv2d(
    tape: &mut Tape,
    input: VarId,
    weight: VarId,
    stride: usize,
    pad: usize,
) -> Result<VarId> {
    let (in_shape, w_shape) = (
        tape.value(input).shape().to_vec(),
        tape.value(weight).shape().to_vec(),
    );
    if in_shape.len() != 4 || w_shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            detail: format!("expected NCHW and OIHW, got {in_shape:?} and {w_shape:?}"),
        });
    }
    if in_shape[1] != w_shape[1] {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            detail: format!("input channels {} != weight channels {}", in_shape[1], w_shape[1]),
        });
    }
    let geom = ConvGeom::resolve(
        in_shape[1], in_shape[2], in_shape[3], w_shape[2], w_shape[3], stride, pad,
    )?;
    let rg = tape.requires_grad(input) || tape.requires_grad(weight);
    let (out, col) = conv_forward_raw_cols(tape.value(input), tape.value(weight), &geom, w_shape[0]);
    tape.push(
        out,
        rg,
        Box::new(Conv2dOp {
            input,
            weight,
            geom,
            out_c: w_shape[0],
            col: if rg { col } else { Vec::new() },
        }),
        "conv2d",
    )
}

/// Convolution on plain tensors, outside the tape (reference paths, inference).
pub fn conv2d_raw(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (in_shape, w_shape) = (input.shape(), weight.shape());
    if in_shape[1] != w_shape[1] {
        return Err(Error::ShapeMismatch {
            context: "conv2d_raw",
            detail: format!("input channels {} != weight channels {}", in_shape[1], w_shape[1]),
        });
    }
    let geom = ConvGeom::resolve(
        in_shape[1], in_shape[2], in_shape[3], w_shape[2], w_shape[3], stride, pad,
    )?;
    Ok(conv_forward_raw(input, weight, &geom, w_shape[0]))
}

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

struct DenseOp {
    input: VarId,
    weight: VarId,
    bias: VarId,
}

impl TapeOp for DenseOp {
    fn backward(&self, grad_out: &Tensor, nodes: &[Node], sink: &mut GradSink) {
        let input = &nodes[self.input.0].value;
        let weight = &nodes[self.weight.0].value;
        let (n, f) = (input.shape()[0], input.shape()[1]);
        let g = weight.shape()[0];
        if nodes[self.input.0].requires_grad {
            let mut gx = vec![0.0; n * f];
            matmul_acc(grad_out.data(), weight.data(), n, g, f, &mut gx);
            sink.add(self.input, Tensor::from_raw(vec![n, f], gx));
        }
        if nodes[self.weight.0].requires_grad {
            let mut gw = vec![0.0; g * f];
            matmul_atb_acc(grad_out.data(), input.data(), n, g, f, &mut gw);
            sink.add(self.weight, Tensor::from_raw(vec![g, f], gw));
        }
        if nodes[self.bias.0].requires_grad {
            let mut gb = vec![0.0; g];
            for row in 0..n {
                for j in 0..g {
                    gb[j] += grad_out.data()[row * g + j];
                }
            }
            sink.add(self.bias, Tensor::from_raw(vec![g], gb));
        }
    }
}

/// out = input . weight^T + bias, input [N x F], weight [G x F], bias [G].
pub fn dense(tape: &mut Tape, input: VarId, weight: VarId, bias: VarId) -> Result<VarId> {
    let in_shape = tape.value(input).shape().to_vec();
    let w_shape = tape.value(weight).shape().to_vec();
    let b_shape = tape.value(bias).shape().to_vec();
    if in_shape.len() != 2 || w_shape.len() != 2 || in_shape[1] != w_shape[1] || b_shape != [w_shape[0]]
    {
        return Err(Error::ShapeMismatch {
            context: "dense",
            detail: format!("input {in_shape:?}, weight {w_shape:?}, bias {b_shape:?}"),
        });
    }
    let (n, f, g) = (in_shape[0], in_shape[1], w_shape[0]);
    let mut out = vec![0.0; n * g];
    matmul_abt_acc(tape.value(input).data(), tape.value(weight).data(), n, f, g, &mut out);
    for row in 0..n {
        for j in 0..g {
            out[row * g + j] += tape.value(bias).data()[j];
        }
    }
    let rg = tape.requires_grad(input) || tape.requires_grad(weight) || tape.requires_grad(bias);
    tape.push(
        Tensor::from_raw(vec![n, g], out),
        rg,
        Box::new(DenseOp { input, weight, bias }),
        "dense",
    )
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

struct ReluOp {
    input: VarId,
}

impl TapeOp for ReluOp {
    fn backward(&self, grad_out: &Tensor, nodes: &[Node], sink: &mut GradSink) {
        let x = &nodes[self.input.0].value;
        // Derivative at exactly 0 is defined as 0.
        let g = grad_out
            .data()
            .iter()
            .zip(x.data())
            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
            .collect();
        sink.add(self.input, Tensor::from_raw(x.shape().to_vec(), g));
    }
}

pub fn relu(tape: &mut Tape, input: VarId) -> Result<VarId> {
    relu_traced(tape, input, None)
}

/// ReLU with its pass/zero masks optionally recorded on a trace, so that a
/// frozen replay is piecewise linear through the kinks and finite differences
/// of the replay match the backward pass exactly.
pub fn relu_traced(
    tape: &mut Tape,
    input: VarId,
    trace: Option<&std::cell::RefCell<crate::quantizer::QuantTrace>>,
) -> Result<VarId> {
    let x = tape.value(input);
    let out = match trace {
        None => x.map(|v| v.max(0.0)),
        Some(tr) => {
            let mut tr = tr.borrow_mut();
            let data = x
                .data()
                .iter()
                .map(|&v| if tr.mask(v > 0.0) { v } else { 0.0 })
                .collect();
            Tensor::from_raw(x.shape().to_vec(), data)
        }
    };
    let rg = tape.requires_grad(input);
    tape.push(out, rg, Box::new(ReluOp { input }), "relu")
}

// ---------------------------------------------------------------------------
// residual add
// ---------------------------------------------------------------------------

struct AddOp {
    lhs: VarId,
    rhs: VarId,
}

impl TapeOp for AddOp {
    fn backward(&self, grad_out: &Tensor, nodes: &[Node], sink: &mut GradSink) {
        if nodes[self.lhs.0].requires_grad {
            sink.add(self.lhs, grad_out.clone());
        }
        if nodes[self.rhs.0].requires_grad {
            sink.add(self.rhs, grad_out.clone());
        }
    }
}

pub fn add(tape: &mut Tape, lhs: VarId, rhs: VarId) -> Result<VarId> {
    let out = tape.value(lhs).add(tape.value(rhs))?;
    let rg = tape.requires_grad(lhs) || tape.requires_grad(rhs);
    tape.push(out, rg, Box::new(AddOp { lhs, rhs }), "add")
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BnBuffers {
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BnBuffers {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
        }
    }
}

struct BatchNormOp {
    input: VarId,
    gamma: VarId,
    beta: VarId,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    training: bool,
}

impl TapeOp for BatchNormOp {
    fn backward(&self, grad_out: &Tensor, nodes: &[Node], sink: &mut GradSink) {
        let x = &nodes[self.input.0].value;
        let gamma = &nodes[self.gamma.0].value;
        let (n, c, h, w) = nchw(x);
        let m = (n * h * w) as f64;
        let plane = h * w;

        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                let mu = self.mean[ch];
                let is = self.inv_std[ch];
                for i in 0..plane {
                    let dy = grad_out.data()[base + i];
                    let xhat = (x.data()[base + i] - mu) * is;
                    dbeta[ch] += dy;
                    dgamma[ch] += dy * xhat;
                    sum_dy[ch] += dy;
                    sum_dy_xhat[ch] += dy * xhat;
                }
            }
        }
        if nodes[self.input.0].requires_grad {
            let mut dx = vec![0.0; x.numel()];
            for img in 0..n {
                for ch in 0..c {
                    let base = (img * c + ch) * plane;
                    let mu = self.mean[ch];
                    let is = self.inv_std[ch];
                    let gch = gamma.data()[ch];
                    for i in 0..plane {
                        let dy = grad_out.data()[base + i];
                        dx[base + i] = if self.training {
                            let xhat = (x.data()[base + i] - mu) * is;
                            gch * is / m * (m * dy - sum_dy[ch] - xhat * sum_dy_xhat[ch])
                        } else {
                            gch * is * dy
                        };
                    }
                }
            }
            sink.add(self.input, Tensor::from_raw(x.shape().to_vec(), dx));
        }
        if nodes[self.gamma.0].requires_grad {
            sink.add(self.gamma, Tensor::from_raw(vec![c], dgamma));
        }
        if nodes[self.beta.0].requires_grad {
            sink.add(self.beta, Tensor::from_raw(vec![c], dbeta));
        }
    }
}

fn nchw(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

/// Batch normalization over NCHW. Training mode normalizes by batch
/// statistics; `update_running` folds them into the running buffers with the
/// given momentum. Eval mode normalizes by the running buffers.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm(
    tape: &mut Tape,
    input: VarId,
    gamma: VarId,
    beta: VarId,
    buffers: &mut BnBuffers,
    training: bool,
    update_running: bool,
    momentum: f64,
    eps: f64,
) -> Result<VarId> {
    if eps <= 0.0 {
        return Err(Error::InvalidArg("batchnorm eps must be > 0".to_string()));
    }
    let x = tape.value(input);
    let (n, c, h, w) = nchw(x);
    if tape.value(gamma).numel() != c || tape.value(beta).numel() != c {
        return Err(Error::ShapeMismatch {
            context: "batchnorm",
            detail: format!("gamma/beta must have {c} channels"),
        });
    }
    let m = n * h * w;
    if training && m == 0 {
        return Err(Error::InvalidArg(
            "batchnorm training mode requires non-empty batch x spatial extent".to_string(),
        ));
    }
    let plane = h * w;

    let (mean, var) = if training {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                for i in 0..plane {
                    mean[ch] += x.data()[base + i];
                }
            }
        }
        for v in mean.iter_mut() {
            *v /= m as f64;
        }
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                for i in 0..plane {
                    let d = x.data()[base + i] - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        for v in var.iter_mut() {
            *v /= m as f64;
        }
        (mean, var)
    } else {
        (
            buffers.running_mean.data().to_vec(),
            buffers.running_var.data().to_vec(),
        )
    };

    if training && update_running {
        let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
        for ch in 0..c {
            let rm = buffers.running_mean.data()[ch];
            let rv = buffers.running_var.data()[ch];
            buffers.running_mean.data_mut()[ch] = (1.0 - momentum) * rm + momentum * mean[ch];
            buffers.running_var.data_mut()[ch] = (1.0 - momentum) * rv + momentum * var[ch] * unbias;
        }
    }

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let gamma_v = tape.value(gamma).data().to_vec();
    let beta_v = tape.value(beta).data().to_vec();
    let mut out = vec![0.0; x.numel()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let (mu, is) = (mean[ch], inv_std[ch]);
            let (g, b) = (gamma_v[ch], beta_v[ch]);
            for i in 0..plane {
                out[base + i] = g * (x.data()[base + i] - mu) * is + b;
            }
        }
    }
    let rg = tape.requires_grad(input) || tape.requires_grad(gamma) || tape.requires_grad(beta);
    tape.push(
        Tensor::from_raw(x.shape().to_vec(), out),
        rg,
        Box::new(BatchNormOp {
            input,
            gamma,
            beta,
            mean,
            inv_std,
            training,
        }),
        "batchnorm",
    )
}

// ---------------------------------------------------------------------------
// global average pool
// ---------------------------------------------------------------------------

struct GlobalAvgPoolOp {
    input: VarId,
}

impl TapeOp for GlobalAvgPoolOp {
    fn backward(&self, grad_out: &Tensor, nodes: &[Node], sink: &mut GradSink) {
        let x = &nodes[self.input.0].value;
        let (n, c, h, w) = nchw(x);
        let plane = h * w;
        let scale = 1.0 / plane as f64;
        let mut gx = vec![0.0; x.numel()];
        for img in 0..n {
            for ch in 0..c {
                let g = grad_out.data()[img * c + ch] * scale;
                let base = (img * c + ch) * plane;
                for i in 0..plane {
                    gx[base + i] = g;
                }
            }
        }
        sink.add(self.input, Tensor::from_raw(x.shape().to_vec(), gx));
    }
}

/// Per-channel spatial mean: NCHW -> N x C.
pub fn global_avg_pool(tape: &mut Tape, input: VarId) -> Result<VarId> {
    let x = tape.value(input);
    let (n, c, h, w) = nchw(x);
    let plane = h * w;
    let mut out = vec![0.0; n * c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let mut acc = 0.0;
            for i in 0..plane {
                acc += x.data()[base + i];
            }
            out[img * c + ch] = acc / plane as f64;
        }
    }
    let rg = tape.requires_grad(input);
    tape.push(
        Tensor::from_raw(vec![n, c], out),
        rg,
        Box::new(GlobalAvgPoolOp { input }),
        "global_avg_pool",
    )
}

// ---------------------------------------------------------------------------
// softmax cross-entropy
// ---------------------------------------------------------------------------

struct SoftmaxXentOp {
    logits: VarId,
    labels: Vec<usize>,
    probs: Vec<f64>,
}

impl TapeOp for SoftmaxXentOp {
    fn backward(&self, grad_out: &Tensor, nodes: &[Node], sink: &mut GradSink) {
        let logits = &nodes[self.logits.0].value;
        let (n, k) = (logits.shape()[0], logits.shape()[1]);
        let g = grad_out.item() / n as f64;
        let mut gl = self.probs.clone();
        for (row, &label) in self.labels.iter().enumerate() {
            gl[row * k + label] -= 1.0;
        }
        for v in gl.iter_mut() {
            *v *= g;
        }
        sink.add(self.logits, Tensor::from_raw(vec![n, k], gl));
    }
}

/// Mean over rows of -log softmax(logits)[label].
pub fn softmax_xent(tape: &mut Tape, logits: VarId, labels: &[usize]) -> Result<VarId> {
    let l = tape.value(logits);
    if l.shape().len() != 2 || l.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "softmax_xent",
            detail: format!("logits {:?} vs {} labels", l.shape(), labels.len()),
        });
    }
    let (n, k) = (l.shape()[0], l.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&lb| lb >= k) {
        return Err(Error::InvalidArg(format!("label {bad} out of range 0..{k}")));
    }
    let mut probs = vec![0.0; n * k];
    let mut loss = 0.0;
    for row in 0..n {
        let rl = &l.data()[row * k..(row + 1) * k];
        let max = rl.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0;
        for j in 0..k {
            let e = (rl[j] - max).exp();
            probs[row * k + j] = e;
            denom += e;
        }
        for j in 0..k {
            probs[row * k + j] /= denom;
        }
        loss -= (rl[labels[row]] - max) - denom.ln();
    }
    loss /= n as f64;
    let rg = tape.requires_grad(logits);
    tape.push(
        Tensor::scalar(loss),
        rg,
        Box::new(SoftmaxXentOp {
            logits,
            labels: labels.to_vec(),
            probs,
        }),
        "softmax_xent",
    )
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

/// Max over the given coordinates of |analytic - central difference| /
/// (|central difference| + 1e-8), with f re-evaluated at perturbed points.
pub fn finite_diff_check_coords(
    mut f: impl FnMut(&Tensor) -> f64,
    point: &Tensor,
    analytic: &Tensor,
    h: f64,
    coords: &[usize],
) -> f64 {
    debug_assert!(point.same_shape(analytic));
    let mut worst = 0.0_f64;
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        let rel = (analytic.data()[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Central-difference check over every coordinate of `point`.
pub fn finite_diff_check(
    f: impl FnMut(&Tensor) -> f64,
    point: &Tensor,
    analytic: &Tensor,
    h: f64,
) -> f64 {
    let coords: Vec<usize> = (0..point.numel()).collect();
    finite_diff_check_coords(f, point, analytic, h, &coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn loop_conv(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, w) = nchw(input);
        let (o, _, kh, kw) = nchw(weight);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for img in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let iy = (y * stride + dy) as isize - pad as isize;
                                    let ix = (x * stride + dx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let iv = input.data()
                                        [((img * c + ic) * h + iy as usize) * w + ix as usize];
                                    let wv = weight.data()[((oc * c + ic) * kh + dy) * kw + dx];
                                    acc += iv * wv;
                                }
                            }
                        }
                        out[((img * o + oc) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        Tensor::from_raw(vec![n, o, oh, ow], out)
    }

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::randn(shape, 1.0, rng)
    }

    #[test]
    fn conv_ones_sums_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let w = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let y = conv2d(&mut tape, x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 9.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = Rng::new(1);
        let input = rand_tensor(&[2, 1, 4, 5], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), false);
        let w = tape.leaf(Tensor::full(&[1, 1, 1, 1], 1.0), false);
        let y = conv2d(&mut tape, x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), input.data());
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = Rng::new(2);
        let input = rand_tensor(&[2, 3, 8, 8], &mut rng);
        let weight = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), false);
        let w = tape.leaf(weight.clone(), false);
        let y = conv2d(&mut tape, x, w, 2, 1).unwrap();
        let reference = loop_conv(&input, &weight, 2, 1);
        assert_eq!(tape.value(y).shape(), reference.shape());
        for (a, b) in tape.value(y).data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]), false);
        assert!(conv2d(&mut tape, x, w, 1, 0).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        let input = rand_tensor(&[2, 2, 5, 5], &mut rng);
        let weight = rand_tensor(&[3, 2, 3, 3], &mut rng);

        let run = |inp: &Tensor, wt: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(inp.clone(), false);
            let w = tape.leaf(wt.clone(), false);
            let y = conv2d(&mut tape, x, w, 2, 1).unwrap();
            // Quadratic head makes the scalar depend nonlinearly on the output.
            tape.value(y).data().iter().map(|v| v * v).sum()
        };

        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), true);
        let w = tape.leaf(weight.clone(), true);
        let y = conv2d(&mut tape, x, w, 2, 1).unwrap();
        struct SumSq {
            input: VarId,
        }
        impl TapeOp for SumSq {
            fn backward(&self, grad_out: &Tensor, nodes: &[Node], sink: &mut GradSink) {
                let x = &nodes[self.input.0].value;
                sink.add(self.input, x.scale(2.0 * grad_out.item()));
            }
        }
        let loss_val: f64 = tape.value(y).data().iter().map(|v| v * v).sum();
        let loss = tape
            .push(Tensor::scalar(loss_val), true, Box::new(SumSq { input: y }), "sumsq")
            .unwrap();
        let grads = tape.backward(loss).unwrap();

        let coords: Vec<usize> = (0..20).map(|i| i * 7 % input.numel()).collect();
        let err_x = finite_diff_check_coords(
            |p| run(p, &weight),
            &input,
            grads.get(x).unwrap(),
            1e-5,
            &coords,
        );
        assert!(err_x < 1e-4, "input grad error {err_x}");
        let coords: Vec<usize> = (0..20).map(|i| i * 3 % weight.numel()).collect();
        let err_w = finite_diff_check_coords(
            |p| run(&input, p),
            &weight,
            grads.get(w).unwrap(),
            1e-5,
            &coords,
        );
        assert!(err_w < 1e-4, "weight grad error {err_w}");
    }

    #[test]
    fn dense_identity_and_affine() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), false);
        let w = tape.leaf(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            false,
        );
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        let y = dense(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(), false);
        let w = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(), false);
        let b = tape.leaf(Tensor::new(vec![1], vec![1.0]).unwrap(), false);
        let y = dense(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
    }

    #[test]
    fn dense_matches_loop_oracle() {
        let mut rng = Rng::new(4);
        let input = rand_tensor(&[4, 10], &mut rng);
        let weight = rand_tensor(&[3, 10], &mut rng);
        let bias = rand_tensor(&[3], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), false);
        let w = tape.leaf(weight.clone(), false);
        let b = tape.leaf(bias.clone(), false);
        let y = dense(&mut tape, x, w, b).unwrap();
        for row in 0..4 {
            for j in 0..3 {
                let mut acc = bias.data()[j];
                for p in 0..10 {
                    acc += input.data()[row * 10 + p] * weight.data()[j * 10 + p];
                }
                let got = tape.value(y).data()[row * 3 + j];
                assert!((got - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn relu_masks_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
        let y = relu(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        // grad of sum(relu(x)) at [-1, 2] is [0, 1]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap(), true);
        let y = relu(&mut tape, x).unwrap();
        struct Sum {
            input: VarId,
        }
        impl TapeOp for Sum {
            fn backward(&self, grad_out: &Tensor, nodes: &[Node], sink: &mut GradSink) {
                let x = &nodes[self.input.0].value;
                sink.add(self.input, Tensor::full(x.shape(), grad_out.item()));
            }
        }
        let s = tape
            .push(
                Tensor::scalar(tape.value(y).sum()),
                true,
                Box::new(Sum { input: y }),
                "sum",
            )
            .unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn batchnorm_normalizes_batch_statistics() {
        let mut rng = Rng::new(5);
        let input = rand_tensor(&[4, 3, 5, 5], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(input, false);
        let g = tape.leaf(Tensor::full(&[3], 1.0), false);
        let b = tape.leaf(Tensor::zeros(&[3]), false);
        let mut buffers = BnBuffers::new(3);
        let y = batchnorm(&mut tape, x, g, b, &mut buffers, true, true, 0.1, 1e-5).unwrap();
        let out = tape.value(y);
        let plane = 25;
        for ch in 0..3 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for img in 0..4 {
                let base = (img * 3 + ch) * plane;
                for i in 0..plane {
                    mean += out.data()[base + i];
                }
            }
            mean /= 100.0;
            for img in 0..4 {
                let base = (img * 3 + ch) * plane;
                for i in 0..plane {
                    let d = out.data()[base + i] - mean;
                    var += d * d;
                }
            }
            var /= 100.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn batchnorm_eval_is_affine_in_running_stats() {
        let mut rng = Rng::new(6);
        let input = rand_tensor(&[2, 2, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), false);
        let g = tape.leaf(Tensor::full(&[2], 2.0), false);
        let b = tape.leaf(Tensor::full(&[2], 1.0), false);
        let mut buffers = BnBuffers::new(2);
        let y = batchnorm(&mut tape, x, g, b, &mut buffers, false, false, 0.1, 1e-5).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(input.data()) {
            let expect = 2.0 * i / (1.0f64 + 1e-5).sqrt() + 1.0;
            assert!((o - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_grad_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let input = rand_tensor(&[3, 2, 4, 4], &mut rng);
        let gamma = Tensor::new(vec![2], vec![1.3, 0.7]).unwrap();
        let beta = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        // a fixed random linear head keeps every coordinate's response
        // generically nonzero, so the relative errors are well conditioned
        let head = rand_tensor(&[3, 2, 4, 4], &mut rng);

        let run = |inp: &Tensor, gm: &Tensor, bt: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(inp.clone(), false);
            let g = tape.leaf(gm.clone(), false);
            let b = tape.leaf(bt.clone(), false);
            let mut buffers = BnBuffers::new(2);
            let y = batchnorm(&mut tape, x, g, b, &mut buffers, true, false, 0.1, 1e-5).unwrap();
            tape.value(y)
                .data()
                .iter()
                .zip(head.data())
                .map(|(v, w)| v * w)
                .sum()
        };

        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), true);
        let g = tape.leaf(gamma.clone(), true);
        let b = tape.leaf(beta.clone(), true);
        let mut buffers = BnBuffers::new(2);
        let y = batchnorm(&mut tape, x, g, b, &mut buffers, true, false, 0.1, 1e-5).unwrap();
        struct Weighted {
            input: VarId,
            weights: Tensor,
        }
        impl TapeOp for Weighted {
            fn backward(&self, grad_out: &Tensor, _nodes: &[Node], sink: &mut GradSink) {
                sink.add(self.input, self.weights.scale(grad_out.item()));
            }
        }
        let val: f64 = tape
            .value(y)
            .data()
            .iter()
            .zip(head.data())
            .map(|(v, w)| v * w)
            .sum();
        let loss = tape
            .push(
                Tensor::scalar(val),
                true,
                Box::new(Weighted { input: y, weights: head.clone() }),
                "weighted",
            )
            .unwrap();
        let grads = tape.backward(loss).unwrap();

        // every coordinate of every argument checked
        let e = finite_diff_check(|p| run(p, &gamma, &beta), &input, grads.get(x).unwrap(), 1e-5);
        assert!(e < 1e-4, "bn input grad err {e}");
        let e = finite_diff_check(|p| run(&input, p, &beta), &gamma, grads.get(g).unwrap(), 1e-5);
        assert!(e < 1e-4, "bn gamma grad err {e}");
        let e = finite_diff_check(|p| run(&input, &gamma, p), &beta, grads.get(b).unwrap(), 1e-5);
        assert!(e < 1e-4, "bn beta grad err {e}");
    }

    #[test]
    fn gap_constant_and_oracle() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 4, 4], 2.5), false);
        let y = global_avg_pool(&mut tape, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));

        let mut rng = Rng::new(8);
        let input = rand_tensor(&[2, 3, 5, 7], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), false);
        let y = global_avg_pool(&mut tape, x).unwrap();
        for img in 0..2 {
            for ch in 0..3 {
                let base = (img * 3 + ch) * 35;
                let mean: f64 = input.data()[base..base + 35].iter().sum::<f64>() / 35.0;
                let got = tape.value(y).data()[img * 3 + ch];
                assert!((got - mean).abs() < 1e-7);
            }
        }

        // 1x1 spatial input acts as a squeeze
        let input = rand_tensor(&[2, 4, 1, 1], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), false);
        let y = global_avg_pool(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), input.data());
    }

    #[test]
    fn xent_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4, 10]), false);
        let loss = softmax_xent(&mut tape, x, &[0, 3, 5, 9]).unwrap();
        assert!((tape.value(loss).item() - 10.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn xent_confident_correct_class_is_tiny() {
        let mut data = vec![0.0; 10];
        data[4] = 50.0;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 10], data).unwrap(), false);
        let loss = softmax_xent(&mut tape, x, &[4]).unwrap();
        assert!(tape.value(loss).item() < 1e-10);
    }

    #[test]
    fn xent_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4]), false);
        assert!(softmax_xent(&mut tape, x, &[4]).is_err());
    }

    #[test]
    fn xent_matches_log_sum_exp_reference() {
        let mut rng = Rng::new(9);
        let logits = rand_tensor(&[3, 4], &mut rng);
        let labels = [1usize, 0, 3];
        let mut tape = Tape::new();
        let x = tape.leaf(logits.clone(), true);
        let loss = softmax_xent(&mut tape, x, &labels).unwrap();

        let scalar_ref = |l: &Tensor| -> f64 {
            let mut total = 0.0;
            for (row, &lb) in labels.iter().enumerate() {
                let r = &l.data()[row * 4..(row + 1) * 4];
                let lse = r.iter().map(|v| v.exp()).sum::<f64>().ln();
                total += lse - r[lb];
            }
            total / 3.0
        };
        assert!((tape.value(loss).item() - scalar_ref(&logits)).abs() < 1e-6);

        let grads = tape.backward(loss).unwrap();
        let e = finite_diff_check(scalar_ref, &logits, grads.get(x).unwrap(), 1e-5);
        assert!(e < 1e-4, "xent grad err {e}");
    }

    #[test]
    fn finite_diff_harness_known_derivative() {
        let point = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let analytic = Tensor::new(vec![2], vec![2.0, 4.0]).unwrap();
        let err = finite_diff_check(
            |p| p.data().iter().map(|v| v * v).sum(),
            &point,
            &analytic,
            1e-4,
        );
        assert!(err < 1e-6, "err {err}");

        // constant function: both sides zero
        let zeros = Tensor::zeros(&[2]);
        let err = finite_diff_check(|_| 3.0, &point, &zeros, 1e-4);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn every_op_backward_matches_finite_differences() {
        // 100 sampled coordinate trials per op at smooth points, fixed seed
        let mut rng = Rng::new(0xfd);
        let quadratic = |t: &Tensor| -> f64 { t.data().iter().map(|v| v * v).sum() };

        struct SumSq {
            input: VarId,
        }
        impl TapeOp for SumSq {
            fn backward(&self, grad_out: &Tensor, nodes: &[Node], sink: &mut GradSink) {
                let x = &nodes[self.input.0].value;
                sink.add(self.input, x.scale(2.0 * grad_out.item()));
            }
        }
        let head = |tape: &mut Tape, y: VarId| -> VarId {
            let v: f64 = tape.value(y).data().iter().map(|x| x * x).sum();
            tape.push(Tensor::scalar(v), true, Box::new(SumSq { input: y }), "sumsq")
                .unwrap()
        };

        // conv2d: inputs and weights over several shapes
        let mut trials = 0;
        for (shape_x, shape_w, stride, pad) in [
            (vec![2usize, 2, 5, 5], vec![3usize, 2, 3, 3], 1usize, 1usize),
            (vec![1, 3, 6, 4], vec![2, 3, 3, 3], 2, 1),
            (vec![2, 1, 4, 4], vec![2, 1, 1, 1], 1, 0),
        ] {
            let x_val = Tensor::randn(&shape_x, 1.0, &mut rng);
            let w_val = Tensor::randn(&shape_w, 1.0, &mut rng);
            let mut tape = Tape::new();
            let x = tape.leaf(x_val.clone(), true);
            let w = tape.leaf(w_val.clone(), true);
            let y = conv2d(&mut tape, x, w, stride, pad).unwrap();
            let loss = head(&mut tape, y);
            let grads = tape.backward(loss).unwrap();
            for (point, analytic, other) in [
                (&x_val, grads.get(x).unwrap(), false),
                (&w_val, grads.get(w).unwrap(), true),
            ] {
                let coords: Vec<usize> =
                    (0..20).map(|i| (i * 13 + 1) % point.numel()).collect();
                let eval = |p: &Tensor| {
                    let mut t = Tape::new();
                    let (a, b) = if other {
                        (t.leaf(x_val.clone(), false), t.leaf(p.clone(), false))
                    } else {
                        (t.leaf(p.clone(), false), t.leaf(w_val.clone(), false))
                    };
                    let y = conv2d(&mut t, a, b, stride, pad).unwrap();
                    quadratic(t.value(y))
                };
                let err = finite_diff_check_coords(eval, point, analytic, 1e-5, &coords);
                assert!(err < 1e-4, "conv2d err {err}");
                trials += coords.len();
            }
        }
        assert!(trials >= 100);

        // dense: input, weight and bias coordinates
        let mut trials = 0;
        for _ in 0..3 {
            let x_val = Tensor::randn(&[4, 10], 1.0, &mut rng);
            let w_val = Tensor::randn(&[3, 10], 1.0, &mut rng);
            let b_val = Tensor::randn(&[3], 1.0, &mut rng);
            let mut tape = Tape::new();
            let x = tape.leaf(x_val.clone(), true);
            let w = tape.leaf(w_val.clone(), true);
            let b = tape.leaf(b_val.clone(), true);
            let y = dense(&mut tape, x, w, b).unwrap();
            let loss = head(&mut tape, y);
            let grads = tape.backward(loss).unwrap();
            for which in 0..3 {
                let (point, analytic) = match which {
                    0 => (&x_val, grads.get(x).unwrap()),
                    1 => (&w_val, grads.get(w).unwrap()),
                    _ => (&b_val, grads.get(b).unwrap()),
                };
                let eval = |p: &Tensor| {
                    let mut t = Tape::new();
                    let xx = t.leaf(if which == 0 { p.clone() } else { x_val.clone() }, false);
                    let ww = t.leaf(if which == 1 { p.clone() } else { w_val.clone() }, false);
                    let bb = t.leaf(if which == 2 { p.clone() } else { b_val.clone() }, false);
                    let y = dense(&mut t, xx, ww, bb).unwrap();
                    quadratic(t.value(y))
                };
                let err = finite_diff_check(eval, point, analytic, 1e-5);
                assert!(err < 1e-4, "dense err {err}");
                trials += point.numel();
            }
        }
        assert!(trials >= 100);

        // relu at points away from the kink
        let mut vals = Vec::new();
        while vals.len() < 120 {
            let v = rng.normal();
            if v.abs() > 1e-3 {
                vals.push(v);
            }
        }
        let x_val = Tensor::new(vec![vals.len()], vals).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(x_val.clone(), true);
        let y = relu(&mut tape, x).unwrap();
        let loss = head(&mut tape, y);
        let grads = tape.backward(loss).unwrap();
        let err = finite_diff_check(
            |p| {
                let mut t = Tape::new();
                let x = t.leaf(p.clone(), false);
                let y = relu(&mut t, x).unwrap();
                quadratic(t.value(y))
            },
            &x_val,
            grads.get(x).unwrap(),
            1e-5,
        );
        assert!(err < 1e-4, "relu err {err}");

        // global average pool
        let x_val = Tensor::randn(&[3, 4, 3, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x_val.clone(), true);
        let y = global_avg_pool(&mut tape, x).unwrap();
        let loss = head(&mut tape, y);
        let grads = tape.backward(loss).unwrap();
        let err = finite_diff_check(
            |p| {
                let mut t = Tape::new();
                let x = t.leaf(p.clone(), false);
                let y = global_avg_pool(&mut t, x).unwrap();
                quadratic(t.value(y))
            },
            &x_val,
            grads.get(x).unwrap(),
            1e-5,
        );
        assert!(err < 1e-4, "gap err {err}");

        // softmax cross-entropy over several label sets
        let mut trials = 0;
        for round in 0..4 {
            let logits = Tensor::randn(&[5, 7], 1.0, &mut rng);
            let labels: Vec<usize> = (0..5).map(|i| (i + round) % 7).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(logits.clone(), true);
            let loss = softmax_xent(&mut tape, x, &labels).unwrap();
            let grads = tape.backward(loss).unwrap();
            let err = finite_diff_check(
                |p| {
                    let mut t = Tape::new();
                    let x = t.leaf(p.clone(), false);
                    let l = softmax_xent(&mut t, x, &labels).unwrap();
                    t.value(l).item()
                },
                &logits,
                grads.get(x).unwrap(),
                1e-5,
            );
            assert!(err < 1e-4, "xent err {err}");
            trials += logits.numel();
        }
        assert!(trials >= 100);
    }

    #[test]
    fn conv_counter_counts_invocations() {
        reset_conv_call_count();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let w = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        conv2d(&mut tape, x, w, 1, 0).unwrap();
        conv2d(&mut tape, x, w, 1, 0).unwrap();
        assert_eq!(conv_call_count(), 2);
        reset_conv_call_count();
        assert_eq!(conv_call_count(), 0);
    }
}
