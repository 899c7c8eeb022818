//! Forward and backward passes for every layer the models need.
//!
//! Layout conventions: activations are `[N, C, H, W]` (row-major), conv
//! weights `[Cout, Cin, kh, kw]`, dense weights `[Din, Dout]`. Stride is
//! fixed at 1. All backward passes are hand-derived and verified against
//! the finite-difference oracle in `gradcheck`.
//!
//! Determinism: every output element is produced by exactly one task with a
//! fixed inner summation order, so results are bit-identical across reruns
//! and thread counts.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial padding for convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    /// Zero-pad so the output has the same spatial size as the input.
    Same,
    /// No padding; the kernel must fit inside the input.
    Valid,
}

/// Train/eval switch for layers that behave differently during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// matmul kernels (sequential per output row; deterministic)
// ---------------------------------------------------------------------------

/// `out[m,n] += a[m,k] · b[k,n]`, all row-major.
fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `dst[cols,rows] = src[rows,cols]ᵀ`, both row-major.
fn transpose<S: Scalar>(src: &[S], rows: usize, cols: usize, dst: &mut [S]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        for (c, &v) in row.iter().enumerate() {
            dst[c * rows + r] = v;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]` — i.e. `out[i,j] += Σ_r a[r,i]·b[r,j]`.
fn matmul_atb_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for r in 0..m {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * n..(r + 1) * n];
        for (i, &ari) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += ari * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
    padding: Padding,
) -> Result<ConvGeom> {
    if input.rank() != 4 {
        return Err(Error::shape(format!(
            "conv2d input must be [N,Cin,H,W], got {:?}",
            input.shape()
        )));
    }
    if weights.rank() != 4 {
        return Err(Error::shape(format!(
            "conv2d weights must be [Cout,Cin,kh,kw], got {:?}",
            weights.shape()
        )));
    }
    let (n, cin, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (cout, wcin, kh, kw) = (
        weights.dim(0),
        weights.dim(1),
        weights.dim(2),
        weights.dim(3),
    );
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {cin} channels, weights expect {wcin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(format!(
            "conv2d bias must be [{cout}], got {:?}",
            bias.shape()
        )));
    }
    let (pad_top, pad_left, oh, ow) = match padding {
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, h, w),
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::shape(format!(
                    "conv2d valid: kernel {kh}x{kw} exceeds input {h}x{w}"
                )));
            }
            (0, 0, h - kh + 1, w - kw + 1)
        }
    };
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        pad_top,
        pad_left,
        oh,
        ow,
    })
}

/// Unfold one sample into `[Cin·kh·kw, oh·ow]` columns (zero-padded).
fn im2col<S: Scalar>(sample: &[S], g: &ConvGeom, cols: &mut [S]) {
    let p = g.oh * g.ow;
    debug_assert_eq!(cols.len(), g.cin * g.kh * g.kw * p);
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &sample[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let dst_row = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy + dy) as isize - g.pad_top as isize;
                    let dst = &mut dst_row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    // source x for output x=0..ow is ix = x + dx - pad_left
                    let shift = dx as isize - g.pad_left as isize;
                    let x_lo = (-shift).max(0) as usize;
                    let x_hi = ((g.w as isize - shift).min(g.ow as isize)).max(0) as usize;
                    dst[..x_lo].fill(S::zero());
                    dst[x_hi..].fill(S::zero());
                    if x_lo < x_hi {
                        let src_base = iy as usize * g.w;
                        let src_lo = (x_lo as isize + shift) as usize;
                        dst[x_lo..x_hi].copy_from_slice(
                            &plane[src_base + src_lo..src_base + src_lo + (x_hi - x_lo)],
                        );
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the column gradient of one sample back to input layout.
fn col2im_acc<S: Scalar>(cols: &[S], g: &ConvGeom, sample_grad: &mut [S]) {
    let p = g.oh * g.ow;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &mut sample_grad[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let src_row = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy + dy) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let shift = dx as isize - g.pad_left as isize;
                    let x_lo = (-shift).max(0) as usize;
                    let x_hi = ((g.w as isize - shift).min(g.ow as isize)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let src = &src_row[oy * g.ow..(oy + 1) * g.ow];
                    let dst_base = iy as usize * g.w + (x_lo as isize + shift) as usize;
                    let dst = &mut plane[dst_base..dst_base + (x_hi - x_lo)];
                    for (d, &s) in dst.iter_mut().zip(&src[x_lo..x_hi]) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2-D cross-correlation with bias, stride 1.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
    padding: Padding,
) -> Result<Tensor<S>> {
    let g = conv_geometry(input, weights, bias, padding)?;
    let p = g.oh * g.ow;
    let k = g.cin * g.kh * g.kw;
    let mut out = Tensor::zeros(&[g.n, g.cout, g.oh, g.ow]);
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * p;
    let w_data = weights.data();
    let b_data = bias.data();
    let in_data = input.data();

    out.data_mut()
        .par_chunks_mut(out_stride)
        .enumerate()
        .for_each(|(ni, out_sample)| {
            let mut cols = vec![S::zero(); k * p];
            im2col(&in_data[ni * in_stride..(ni + 1) * in_stride], &g, &mut cols);
            matmul_acc(w_data, &cols, out_sample, g.cout, k, p);
            for co in 0..g.cout {
                let b = b_data[co];
                for o in &mut out_sample[co * p..(co + 1) * p] {
                    *o += b;
                }
            }
        });

    out.check_finite("conv2d")?;
    Ok(out)
}

/// Gradients from a convolution backward pass.
#[derive(Debug)]
pub struct Conv2dGrads<S: Scalar = f32> {
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
    pub input: Tensor<S>,
}

pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    grad_out: &Tensor<S>,
    padding: Padding,
) -> Result<Conv2dGrads<S>> {
    let bias_probe = Tensor::zeros(&[weights.dim(0)]);
    let g = conv_geometry(input, weights, &bias_probe, padding)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::shape(format!(
            "conv2d_backward grad_out must be [{},{},{},{}], got {:?}",
            g.n,
            g.cout,
            g.oh,
            g.ow,
            grad_out.shape()
        )));
    }
    let p = g.oh * g.ow;
    let k = g.cin * g.kh * g.kw;
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * p;
    let in_data = input.data();
    let w_data = weights.data();
    let go_data = grad_out.data();

    // Per-sample partials computed in parallel, reduced in sample order.
    struct Partial<S> {
        grad_w: Vec<S>,
        grad_b: Vec<S>,
        grad_in: Vec<S>,
    }
    let mut w_t = vec![S::zero(); g.cout * k];
    transpose(w_data, g.cout, k, &mut w_t);
    let w_t = &w_t;

    let partials: Vec<Partial<S>> = (0..g.n)
        .into_par_iter()
        .map(|ni| {
            let sample = &in_data[ni * in_stride..(ni + 1) * in_stride];
            let gout = &go_data[ni * out_stride..(ni + 1) * out_stride];
            let mut cols = vec![S::zero(); k * p];
            im2col(sample, &g, &mut cols);
            let mut cols_t = vec![S::zero(); k * p];
            transpose(&cols, k, p, &mut cols_t);

            // grad_w = gout[cout,p] · colsᵀ[p,k]
            let mut grad_w = vec![S::zero(); g.cout * k];
            matmul_acc(gout, &cols_t, &mut grad_w, g.cout, p, k);

            let mut grad_b = vec![S::zero(); g.cout];
            for co in 0..g.cout {
                let mut acc = S::zero();
                for &v in &gout[co * p..(co + 1) * p] {
                    acc += v;
                }
                grad_b[co] = acc;
            }

            // grad_cols = Wᵀ[k,cout] · gout[cout,p], folded back to input layout
            let mut grad_cols = vec![S::zero(); k * p];
            matmul_acc(w_t, gout, &mut grad_cols, k, g.cout, p);
            let mut grad_in = vec![S::zero(); in_stride];
            col2im_acc(&grad_cols, &g, &mut grad_in);

            Partial {
                grad_w,
                grad_b,
                grad_in,
            }
        })
        .collect();

    let mut grad_w = vec![S::zero(); g.cout * k];
    let mut grad_b = vec![S::zero(); g.cout];
    let mut grad_in = vec![S::zero(); g.n * in_stride];
    for (ni, part) in partials.into_iter().enumerate() {
        for (acc, v) in grad_w.iter_mut().zip(&part.grad_w) {
            *acc += *v;
        }
        for (acc, v) in grad_b.iter_mut().zip(&part.grad_b) {
            *acc += *v;
        }
        grad_in[ni * in_stride..(ni + 1) * in_stride].copy_from_slice(&part.grad_in);
    }

    let grads = Conv2dGrads {
        weights: Tensor::from_vec(weights.shape(), grad_w)?,
        bias: Tensor::from_vec(&[g.cout], grad_b)?,
        input: Tensor::from_vec(input.shape(), grad_in)?,
    };
    grads.weights.check_finite("conv2d_backward")?;
    grads.bias.check_finite("conv2d_backward")?;
    grads.input.check_finite("conv2d_backward")?;
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

/// Argmax bookkeeping for the pooling backward pass.
#[derive(Debug, Clone)]
pub struct PoolIndices {
    /// Flat input index of the max of each output cell (first occurrence wins).
    pub indices: Vec<u32>,
    pub input_shape: Vec<usize>,
}

/// 2×2 max pooling with stride 2. Spatial dims must be even.
pub fn maxpool2x2<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, PoolIndices)> {
    if input.rank() != 4 {
        return Err(Error::shape(format!(
            "maxpool2x2 input must be [N,C,H,W], got {:?}",
            input.shape()
        )));
    }
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2x2 requires even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut indices = vec![0u32; n * c * oh * ow];
    let data = input.data();
    let out_data = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        let obase = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let i00 = base + (2 * oy) * w + 2 * ox;
                // scan order: (0,0), (0,1), (1,0), (1,1); ties keep the first
                let cand = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = cand[0];
                let mut best_v = data[best];
                for &ci in &cand[1..] {
                    if data[ci] > best_v {
                        best = ci;
                        best_v = data[ci];
                    }
                }
                out_data[obase + oy * ow + ox] = best_v;
                indices[obase + oy * ow + ox] = best as u32;
            }
        }
    }
    out.check_finite("maxpool2x2")?;
    Ok((
        out,
        PoolIndices {
            indices,
            input_shape: input.shape().to_vec(),
        },
    ))
}

/// Routes each output gradient entirely to its argmax cell.
pub fn maxpool2x2_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    pool: &PoolIndices,
) -> Result<Tensor<S>> {
    if grad_out.len() != pool.indices.len() {
        return Err(Error::shape(format!(
            "maxpool2x2_backward grad_out has {} elements, expected {}",
            grad_out.len(),
            pool.indices.len()
        )));
    }
    let mut grad_in = Tensor::zeros(&pool.input_shape);
    let gi = grad_in.data_mut();
    for (&idx, &g) in pool.indices.iter().zip(grad_out.data()) {
        gi[idx as usize] += g;
    }
    Ok(grad_in)
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

/// Affine map `out = input · weights + bias`.
pub fn dense<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    if input.rank() != 2 || weights.rank() != 2 {
        return Err(Error::shape(format!(
            "dense expects 2-D input and weights, got {:?} and {:?}",
            input.shape(),
            weights.shape()
        )));
    }
    let (n, din) = (input.dim(0), input.dim(1));
    let (wdin, dout) = (weights.dim(0), weights.dim(1));
    if din != wdin {
        return Err(Error::shape(format!(
            "dense inner dims disagree: input [{n},{din}] vs weights [{wdin},{dout}]"
        )));
    }
    if bias.shape() != [dout] {
        return Err(Error::shape(format!(
            "dense bias must be [{dout}], got {:?}",
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, dout]);
    {
        let out_data = out.data_mut();
        for (row, o) in out_data.chunks_exact_mut(dout).enumerate() {
            let _ = row;
            o.copy_from_slice(bias.data());
        }
        matmul_acc(input.data(), weights.data(), out_data, n, din, dout);
    }
    out.check_finite("dense")?;
    Ok(out)
}

#[derive(Debug)]
pub struct DenseGrads<S: Scalar = f32> {
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
    pub input: Tensor<S>,
}

pub fn dense_backward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<DenseGrads<S>> {
    let (n, din) = (input.dim(0), input.dim(1));
    let (_, dout) = (weights.dim(0), weights.dim(1));
    if grad_out.shape() != [n, dout] {
        return Err(Error::shape(format!(
            "dense_backward grad_out must be [{n},{dout}], got {:?}",
            grad_out.shape()
        )));
    }
    let mut grad_w = Tensor::zeros(weights.shape());
    matmul_atb_acc(
        input.data(),
        grad_out.data(),
        grad_w.data_mut(),
        n,
        din,
        dout,
    );

    let mut grad_b = Tensor::zeros(&[dout]);
    {
        let gb = grad_b.data_mut();
        for row in grad_out.data().chunks_exact(dout) {
            for (acc, &v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }

    // grad_in = gout[n,dout] · Wᵀ[dout,din]
    let mut w_t = vec![S::zero(); din * dout];
    transpose(weights.data(), din, dout, &mut w_t);
    let mut grad_in = Tensor::zeros(input.shape());
    matmul_acc(grad_out.data(), &w_t, grad_in.data_mut(), n, dout, din);

    grad_w.check_finite("dense_backward")?;
    grad_b.check_finite("dense_backward")?;
    grad_in.check_finite("dense_backward")?;
    Ok(DenseGrads {
        weights: grad_w,
        bias: grad_b,
        input: grad_in,
    })
}

// ---------------------------------------------------------------------------
// Activations and loss
// ---------------------------------------------------------------------------

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > S::zero() { v } else { S::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// Gradient masked by the forward *input* (derivative at 0 taken as 0).
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "relu_backward shapes disagree: {:?} vs {:?}",
            input.shape(),
            grad_out.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > S::zero() { g } else { S::zero() })
        .collect();
    Ok(Tensor::from_vec(input.shape(), data).expect("same shape"))
}

/// Row-wise softmax over the last axis of a `[N, K]` tensor.
///
/// Max-subtraction keeps rows with magnitudes up to ~1e4 stable.
pub fn softmax<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    if input.rank() != 2 {
        return Err(Error::shape(format!(
            "softmax expects [N,K], got {:?}",
            input.shape()
        )));
    }
    let k = input.dim(1);
    let mut out = Tensor::zeros(input.shape());
    for (row, orow) in input
        .data()
        .chunks_exact(k)
        .zip(out.data_mut().chunks_exact_mut(k))
    {
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out.check_finite("softmax")?;
    Ok(out)
}

/// Clamp floor for log arguments inside the cross-entropy loss.
pub const LOG_CLAMP: f64 = 1e-12;

/// Mean negative log-likelihood of the labelled class.
pub fn cross_entropy<S: Scalar>(probs: &Tensor<S>, labels: &[usize]) -> Result<S> {
    if probs.rank() != 2 {
        return Err(Error::shape(format!(
            "cross_entropy expects [N,K] probabilities, got {:?}",
            probs.shape()
        )));
    }
    let (n, k) = (probs.dim(0), probs.dim(1));
    if labels.len() != n {
        return Err(Error::shape(format!(
            "cross_entropy got {n} rows but {} labels",
            labels.len()
        )));
    }
    let clamp = S::from_f64(LOG_CLAMP);
    let mut total = S::zero();
    for (row, &label) in probs.data().chunks_exact(k).zip(labels) {
        if label >= k {
            return Err(Error::invalid(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        total += -(row[label].max(clamp)).ln();
    }
    let loss = total / S::from_f64(n as f64);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite {
            op: "cross_entropy",
        })
    }
}

/// Combined gradient of softmax followed by mean cross-entropy:
/// `(probs − onehot) / N`, taken with respect to the softmax *inputs*.
pub fn softmax_cross_entropy_backward<S: Scalar>(
    probs: &Tensor<S>,
    labels: &[usize],
) -> Result<Tensor<S>> {
    let (n, k) = (probs.dim(0), probs.dim(1));
    if labels.len() != n {
        return Err(Error::shape(format!(
            "softmax_cross_entropy_backward got {n} rows but {} labels",
            labels.len()
        )));
    }
    let inv_n = S::from_f64(1.0 / n as f64);
    let mut grad = probs.clone();
    for (row, &label) in grad.data_mut().chunks_exact_mut(k).zip(labels) {
        row[label] -= S::one();
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Multipliers recorded by a dropout forward pass; `None` means identity.
#[derive(Debug, Clone)]
pub struct DropoutMask<S: Scalar = f32> {
    multipliers: Option<Vec<S>>,
}

impl<S: Scalar> DropoutMask<S> {
    pub fn identity() -> Self {
        DropoutMask { multipliers: None }
    }

    pub fn is_identity(&self) -> bool {
        self.multipliers.is_none()
    }
}

/// Inverted dropout: train mode zeroes with probability `rate` and scales
/// survivors by `1/(1−rate)`; eval mode is exactly the identity.
pub fn dropout<S: Scalar, R: Rng>(
    input: &Tensor<S>,
    rate: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<(Tensor<S>, DropoutMask<S>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "dropout rate must be in [0,1), got {rate}"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((input.clone(), DropoutMask::identity()));
    }
    let keep_scale = S::from_f64(1.0 / (1.0 - rate));
    let multipliers: Vec<S> = (0..input.len())
        .map(|_| {
            if rng.gen::<f64>() < rate {
                S::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let data = input
        .data()
        .iter()
        .zip(&multipliers)
        .map(|(&v, &m)| v * m)
        .collect();
    Ok((
        Tensor::from_vec(input.shape(), data)?,
        DropoutMask {
            multipliers: Some(multipliers),
        },
    ))
}

pub fn dropout_backward<S: Scalar>(grad_out: &Tensor<S>, mask: &DropoutMask<S>) -> Result<Tensor<S>> {
    match &mask.multipliers {
        None => Ok(grad_out.clone()),
        Some(mult) => {
            if mult.len() != grad_out.len() {
                return Err(Error::shape(format!(
                    "dropout_backward mask covers {} elements, grad has {}",
                    mult.len(),
                    grad_out.len()
                )));
            }
            let data = grad_out
                .data()
                .iter()
                .zip(mult)
                .map(|(&g, &m)| g * m)
                .collect();
            Ok(Tensor::from_vec(grad_out.shape(), data)?)
        }
    }
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

/// Plain SGD: `p ← p − lr·g`, elementwise. No momentum, no weight decay.
pub fn sgd_step<S: Scalar>(param: &mut Tensor<S>, grad: &Tensor<S>, lr: S) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(format!(
            "sgd_step shapes disagree: param {:?} vs grad {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p = *p - lr * g;
    }
    param.check_finite("sgd_step")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let input = t(&[1, 1, 3, 3], (1..=9).map(|v| v as f32).collect());
        let kernel = t(&[1, 1, 1, 1], vec![1.0]);
        let bias = t(&[1], vec![0.0]);
        let out = conv2d(&input, &kernel, &bias, Padding::Same).unwrap();
        assert_eq!(out, input.reshape(&[1, 1, 3, 3]).unwrap());
    }

    #[test]
    fn conv_all_ones_valid_sums_window() {
        let input = Tensor::filled(&[1, 1, 3, 3], 1.0f32);
        let kernel = Tensor::filled(&[1, 1, 3, 3], 1.0f32);
        let bias = t(&[1], vec![0.0]);
        let out = conv2d(&input, &kernel, &bias, Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn conv_same_padding_hand_example() {
        // 2x2 input, 3x3 ones kernel, same padding: each output sums the
        // in-bounds neighbourhood, so every cell sums the whole 2x2 input.
        let input = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let kernel = Tensor::filled(&[1, 1, 3, 3], 1.0f32);
        let bias = t(&[1], vec![0.5]);
        let out = conv2d(&input, &kernel, &bias, Padding::Same).unwrap();
        assert_eq!(out.data(), &[10.5, 10.5, 10.5, 10.5]);
    }

    #[test]
    fn conv_rejects_shape_mismatches() {
        let input = Tensor::filled(&[1, 2, 4, 4], 1.0f32);
        let kernel = Tensor::filled(&[1, 3, 3, 3], 1.0f32);
        let bias = t(&[1], vec![0.0]);
        let err = conv2d(&input, &kernel, &bias, Padding::Same).unwrap_err();
        assert!(err.to_string().contains("channel mismatch"));

        let kernel = Tensor::filled(&[1, 2, 5, 5], 1.0f32);
        assert!(conv2d(&input, &kernel, &bias, Padding::Valid).is_err());
    }

    #[test]
    fn maxpool_basic_and_tie_breaking() {
        let input = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (out, idx) = maxpool2x2(&input).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(idx.indices, vec![3]);

        // Constant input: ties resolve to the first element in scan order.
        let input = Tensor::filled(&[1, 1, 4, 4], 0.7f32);
        let (out, idx) = maxpool2x2(&input).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.7));
        assert_eq!(idx.indices, vec![0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let input = Tensor::filled(&[1, 1, 3, 4], 0.0f32);
        assert!(maxpool2x2(&input).is_err());
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let input = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (_, idx) = maxpool2x2(&input).unwrap();
        let grad_out = t(&[1, 1, 1, 1], vec![5.0]);
        let grad_in = maxpool2x2_backward(&grad_out, &idx).unwrap();
        assert_eq!(grad_in.data(), &[0.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn dense_identity_and_affine_fixture() {
        let input = t(&[1, 2], vec![1.0, 2.0]);
        let eye = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let zero_bias = t(&[2], vec![0.0, 0.0]);
        assert_eq!(dense(&input, &eye, &zero_bias).unwrap(), input);

        let bias = t(&[2], vec![1.0, 1.0]);
        let out = dense(&input, &eye, &bias).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0]);
    }

    #[test]
    fn dense_rejects_inner_dim_mismatch() {
        let input = t(&[1, 3], vec![1.0, 2.0, 3.0]);
        let w = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2], vec![0.0, 0.0]);
        assert!(dense(&input, &w, &b).is_err());
    }

    #[test]
    fn relu_clamps_negatives() {
        let input = t(&[2], vec![-1.0, 2.0]);
        assert_eq!(relu(&input).data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_on_zero_row() {
        let input: Tensor<f32> = Tensor::zeros(&[1, 4]);
        let out = softmax(&input).unwrap();
        assert_eq!(out.data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn softmax_rows_sum_to_one_at_large_magnitude() {
        let input = t(&[2, 3], vec![1e4, -1e4, 0.0, 9.9e3, 1e4, -5e3]);
        let out = softmax(&input).unwrap();
        for row in out.data().chunks_exact(3) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5, "row sum {sum}");
        }
    }

    #[test]
    fn cross_entropy_handles_confident_wrong_prediction() {
        // Probability 0 on the true class must clamp, not return -inf.
        let probs = t(&[1, 2], vec![1.0, 0.0]);
        let loss = cross_entropy(&probs, &[1]).unwrap();
        assert!(loss.is_finite());
        assert!(loss > 20.0); // -ln(1e-12) ≈ 27.6
    }

    #[test]
    fn combined_softmax_xent_gradient_formula() {
        let logits = t(&[2, 3], vec![0.3, -0.1, 0.7, 1.0, 0.0, -1.0]);
        let probs = softmax(&logits).unwrap();
        let grad = softmax_cross_entropy_backward(&probs, &[2, 0]).unwrap();
        for (i, row) in probs.data().chunks_exact(3).enumerate() {
            let label = [2usize, 0][i];
            for (j, &p) in row.iter().enumerate() {
                let onehot = if j == label { 1.0 } else { 0.0 };
                let expected = (p - onehot) / 2.0;
                assert!((grad.data()[i * 3 + j] - expected).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let input = t(&[4], vec![1.0, -2.0, 3.0, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, mask) = dropout(&input, 0.0, &mut rng, Mode::Train).unwrap();
        assert_eq!(out, input);
        assert!(mask.is_identity());

        let (out, mask) = dropout(&input, 0.75, &mut rng, Mode::Eval).unwrap();
        assert_eq!(out, input);
        assert!(mask.is_identity());
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let input = t(&[2], vec![1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(dropout(&input, 1.0, &mut rng, Mode::Train).is_err());
    }

    #[test]
    fn dropout_survival_statistics() {
        let n = 1_000_000;
        let input = Tensor::filled(&[n], 1.0f32);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (out, _) = dropout(&input, 0.75, &mut rng, Mode::Train).unwrap();
        let survivors = out.data().iter().filter(|&&v| v != 0.0).count();
        let survive_frac = survivors as f64 / n as f64;
        assert!(
            (survive_frac - 0.25).abs() <= 0.01,
            "surviving fraction {survive_frac}"
        );
        // Inverted scaling keeps the output mean near the input mean.
        let mean: f64 = out.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() <= 0.02, "output mean {mean}");
    }

    #[test]
    fn dropout_backward_replays_mask() {
        let input = t(&[8], vec![1.0; 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (out, mask) = dropout(&input, 0.5, &mut rng, Mode::Train).unwrap();
        let grad_out = Tensor::filled(&[8], 1.0f32);
        let grad_in = dropout_backward(&grad_out, &mask).unwrap();
        // Gradient passes exactly where the forward pass kept the value.
        for (o, g) in out.data().iter().zip(grad_in.data()) {
            assert_eq!(o, g);
        }
    }

    #[test]
    fn sgd_step_fixtures() {
        let mut p = t(&[1], vec![1.0]);
        let g = t(&[1], vec![2.0]);
        sgd_step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0]);

        sgd_step(&mut p, &g, 0.001).unwrap();
        assert_eq!(p.data(), &[0.998]);

        let bad = t(&[2], vec![0.0, 0.0]);
        assert!(sgd_step(&mut p, &bad, 0.1).is_err());
    }

    #[test]
    fn sgd_fits_separable_toy_set() {
        // Two linearly separable points; a single dense layer + softmax must
        // drive the loss below 0.1 within 2000 steps.
        let x = t(&[2, 2], vec![2.0, 0.0, 0.0, 2.0]);
        let labels = [0usize, 1];
        let mut w: Tensor<f32> = Tensor::zeros(&[2, 2]);
        let mut b = Tensor::zeros(&[2]);
        let mut steps = 0;
        let mut loss = f32::MAX;
        while steps < 2000 {
            let logits = dense(&x, &w, &b).unwrap();
            let probs = softmax(&logits).unwrap();
            loss = cross_entropy(&probs, &labels).unwrap();
            if loss < 0.1 {
                break;
            }
            let grad_logits = softmax_cross_entropy_backward(&probs, &labels).unwrap();
            let grads = dense_backward(&x, &w, &grad_logits).unwrap();
            sgd_step(&mut w, &grads.weights, 0.1).unwrap();
            sgd_step(&mut b, &grads.bias, 0.1).unwrap();
            steps += 1;
        }
        assert!(loss < 0.1, "loss {loss} after {steps} steps");
        assert!(steps <= 2000);
    }

    #[test]
    fn forward_passes_are_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = Tensor::from_vec(
            &[2, 3, 8, 8],
            (0..2 * 3 * 8 * 8)
                .map(|_| rand::Rng::gen_range(&mut rng, -1.0f32..1.0))
                .collect(),
        )
        .unwrap();
        let w = Tensor::from_vec(
            &[4, 3, 3, 3],
            (0..4 * 3 * 3 * 3)
                .map(|_| rand::Rng::gen_range(&mut rng, -0.5f32..0.5))
                .collect(),
        )
        .unwrap();
        let b = Tensor::zeros(&[4]);
        let a = conv2d(&input, &w, &b, Padding::Same).unwrap();
        let c = conv2d(&input, &w, &b, Padding::Same).unwrap();
        assert_eq!(a, c);
    }
}
