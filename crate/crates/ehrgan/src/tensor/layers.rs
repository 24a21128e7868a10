//! Layer kernels as paired forward / backward functions over plain tensors.
//!
//! Convolutions are lowered to im2col + dgemm; the transposed convolution is
//! the exact adjoint (gemm + col2im scatter), which the tests pin down with
//! the inner-product identity `<conv(u), v> == <u, deconv(v)>`.
//!
//! Layout conventions: sequences are `[B, T, C]` row-major (time-major per
//! example, channels contiguous), conv kernels are `[F, w, C]`, dense weights
//! `[I, O]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c[m,n] = a[m,k] * b[k,n] + beta * c`, arbitrary strides, alpha = 1.
/// Bounds are asserted before the unsafe call.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let max_idx = |r: usize, s: usize, rs: isize, cs: isize| -> usize {
        let mut hi = 0i64;
        for (d, st) in [(r, rs), (s, cs)] {
            let edge = (d as i64 - 1) * st as i64;
            if edge > 0 {
                hi += edge;
            }
        }
        hi as usize
    };
    assert!(k == 0 || max_idx(m, k, rsa, csa) < a.len());
    assert!(k == 0 || max_idx(k, n, rsb, csb) < b.len());
    assert!(max_idx(m, n, n as isize, 1) < c.len());
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        } else if beta != 1.0 {
            for v in &mut c[..m * n] {
                *v *= beta;
            }
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_out_len(t: usize, w: usize, stride: usize) -> usize {
    (t - w) / stride + 1
}

/// Gather sliding windows: `[B,T,C] -> [B*t_out, w*C]`. Each row is the
/// window starting at `t*stride`, which is contiguous in the input.
fn im2col(input: &[f64], b: usize, t: usize, c: usize, w: usize, stride: usize) -> Vec<f64> {
    let t_out = conv_out_len(t, w, stride);
    let row = w * c;
    let mut cols = vec![0.0; b * t_out * row];
    for bi in 0..b {
        let base = bi * t * c;
        for to in 0..t_out {
            let src = base + to * stride * c;
            let dst = (bi * t_out + to) * row;
            cols[dst..dst + row].copy_from_slice(&input[src..src + row]);
        }
    }
    cols
}

/// Scatter-add of im2col rows back into `[B,T,C]`; exact adjoint of `im2col`.
fn col2im(cols: &[f64], b: usize, t: usize, c: usize, w: usize, stride: usize, out: &mut [f64]) {
    let t_out = conv_out_len(t, w, stride);
    let row = w * c;
    for bi in 0..b {
        let base = bi * t * c;
        for to in 0..t_out {
            let src = (bi * t_out + to) * row;
            let dst = base + to * stride * c;
            for i in 0..row {
                out[dst + i] += cols[src + i];
            }
        }
    }
}

fn check_conv_args(
    input: &Tensor,
    kernel: &Tensor,
    bias_len: usize,
    bias_want: usize,
    stride: usize,
    what: &str,
) -> Result<(usize, usize, usize, usize, usize)> {
    input.expect_rank(3, what)?;
    kernel.expect_rank(3, what)?;
    let (b, t, c_in) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (f, w, kc) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if stride == 0 {
        return Err(Error::invalid(format!("{what}: stride must be >= 1")));
    }
    if bias_len != bias_want {
        return Err(Error::shape(format!(
            "{what}: bias length {bias_len}, expected {bias_want}"
        )));
    }
    let _ = kc;
    Ok((b, t, c_in, f, w))
}

/// Valid (no padding) correlation along time. `[B,T,C] * [F,w,C] -> [B,t_out,F]`.
pub fn conv1d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (b, t, c, f, w) =
        check_conv_args(input, kernel, bias.len(), kernel.shape()[0], stride, "conv1d")?;
    if kernel.shape()[2] != c {
        return Err(Error::shape(format!(
            "conv1d: input channels {} vs kernel channels {}",
            c,
            kernel.shape()[2]
        )));
    }
    if t < w {
        return Err(Error::shape(format!("conv1d: T={t} shorter than kernel width {w}")));
    }
    let t_out = conv_out_len(t, w, stride);
    let cols = im2col(input.data(), b, t, c, w, stride);
    let mut out = vec![0.0; b * t_out * f];
    let k = w * c;
    // out = cols [m,k] * kernel^T [k,F]
    gemm(b * t_out, k, f, &cols, k as isize, 1, kernel.data(), 1, k as isize, 0.0, &mut out);
    for row in out.chunks_mut(f) {
        for (v, bv) in row.iter_mut().zip(bias.data()) {
            *v += bv;
        }
    }
    Tensor::from_vec(&[b, t_out, f], out)
}

/// Gradients of `conv1d` w.r.t. input, kernel, bias.
pub fn conv1d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, t, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (f, w) = (kernel.shape()[0], kernel.shape()[1]);
    let t_out = conv_out_len(t, w, stride);
    d_out.expect_shape(&[b, t_out, f], "conv1d_backward d_out")?;
    let k = w * c;

    let mut d_bias = vec![0.0; f];
    for row in d_out.data().chunks(f) {
        for (acc, v) in d_bias.iter_mut().zip(row) {
            *acc += v;
        }
    }

    // d_cols = d_out [m,F] * kernel [F,k]
    let mut d_cols = vec![0.0; b * t_out * k];
    gemm(
        b * t_out,
        f,
        k,
        d_out.data(),
        f as isize,
        1,
        kernel.data(),
        k as isize,
        1,
        0.0,
        &mut d_cols,
    );
    let mut d_input = vec![0.0; b * t * c];
    col2im(&d_cols, b, t, c, w, stride, &mut d_input);

    // d_kernel = d_out^T [F,m] * cols [m,k]; the windows are cheap to rebuild.
    let cols = im2col(input.data(), b, t, c, w, stride);
    let mut d_kernel = vec![0.0; f * k];
    gemm(
        f,
        b * t_out,
        k,
        d_out.data(),
        1,
        f as isize,
        &cols,
        k as isize,
        1,
        0.0,
        &mut d_kernel,
    );

    Ok((
        Tensor::from_vec(&[b, t, c], d_input)?,
        Tensor::from_vec(&[f, w, c], d_kernel)?,
        Tensor::from_vec(&[f], d_bias)?,
    ))
}

/// Transposed convolution (adjoint of `conv1d` in its input for zero bias).
/// `[B,T,F] * [F,w,C] -> [B,(T-1)*stride + w, C]`.
pub fn deconv1d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (b, t, f_in, f, w) =
        check_conv_args(input, kernel, bias.len(), kernel.shape()[2], stride, "deconv1d")?;
    let c = kernel.shape()[2];
    if f_in != f {
        return Err(Error::shape(format!(
            "deconv1d: input channels {f_in} vs kernel input channels {f}"
        )));
    }
    let t_out = (t - 1) * stride + w;
    let k = w * c;
    // tmp = input [B*T, F] * kernel [F, w*C], then scatter windows.
    let mut tmp = vec![0.0; b * t * k];
    gemm(b * t, f, k, input.data(), f as isize, 1, kernel.data(), k as isize, 1, 0.0, &mut tmp);
    let mut out = vec![0.0; b * t_out * c];
    col2im(&tmp, b, t_out, c, w, stride, &mut out);
    for row in out.chunks_mut(c) {
        for (v, bv) in row.iter_mut().zip(bias.data()) {
            *v += bv;
        }
    }
    Tensor::from_vec(&[b, t_out, c], out)
}

/// Gradients of `deconv1d` w.r.t. input, kernel, bias.
pub fn deconv1d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, t, f) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (w, c) = (kernel.shape()[1], kernel.shape()[2]);
    let t_out = (t - 1) * stride + w;
    d_out.expect_shape(&[b, t_out, c], "deconv1d_backward d_out")?;
    let k = w * c;

    let mut d_bias = vec![0.0; c];
    for row in d_out.data().chunks(c) {
        for (acc, v) in d_bias.iter_mut().zip(row) {
            *acc += v;
        }
    }

    // Window gather of d_out is exactly im2col with the same geometry.
    let d_tmp = im2col(d_out.data(), b, t_out, c, w, stride);
    // d_input = d_tmp [B*T, k] * kernel^T [k, F]
    let mut d_input = vec![0.0; b * t * f];
    gemm(b * t, k, f, &d_tmp, k as isize, 1, kernel.data(), 1, k as isize, 0.0, &mut d_input);
    // d_kernel = input^T [F, B*T] * d_tmp [B*T, k]
    let mut d_kernel = vec![0.0; f * k];
    gemm(f, b * t, k, input.data(), 1, f as isize, &d_tmp, k as isize, 1, 0.0, &mut d_kernel);

    Ok((
        Tensor::from_vec(&[b, t, f], d_input)?,
        Tensor::from_vec(&[f, w, c], d_kernel)?,
        Tensor::from_vec(&[c], d_bias)?,
    ))
}

/// `[B,I] * [I,O] + b -> [B,O]`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    input.expect_rank(2, "dense input")?;
    weight.expect_rank(2, "dense weight")?;
    let (b, i) = (input.shape()[0], input.shape()[1]);
    let (wi, o) = (weight.shape()[0], weight.shape()[1]);
    if i != wi || bias.len() != o {
        return Err(Error::shape(format!(
            "dense: input [{},{}] weight [{},{}] bias [{}]",
            b,
            i,
            wi,
            o,
            bias.len()
        )));
    }
    let mut out = vec![0.0; b * o];
    gemm(b, i, o, input.data(), i as isize, 1, weight.data(), o as isize, 1, 0.0, &mut out);
    for row in out.chunks_mut(o) {
        for (v, bv) in row.iter_mut().zip(bias.data()) {
            *v += bv;
        }
    }
    Tensor::from_vec(&[b, o], out)
}

pub fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, i) = (input.shape()[0], input.shape()[1]);
    let o = weight.shape()[1];
    d_out.expect_shape(&[b, o], "dense_backward d_out")?;
    let mut d_input = vec![0.0; b * i];
    gemm(b, o, i, d_out.data(), o as isize, 1, weight.data(), 1, o as isize, 0.0, &mut d_input);
    let mut d_weight = vec![0.0; i * o];
    gemm(i, b, o, input.data(), 1, i as isize, d_out.data(), o as isize, 1, 0.0, &mut d_weight);
    let mut d_bias = vec![0.0; o];
    for row in d_out.data().chunks(o) {
        for (acc, v) in d_bias.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok((
        Tensor::from_vec(&[b, i], d_input)?,
        Tensor::from_vec(&[i, o], d_weight)?,
        Tensor::from_vec(&[o], d_bias)?,
    ))
}

/// Max over the time axis: `[B,T,F] -> [B,F]` plus flat argmax indices.
/// Ties resolve to the earliest time step.
pub fn max_over_time(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    input.expect_rank(3, "max_over_time")?;
    let (b, t, f) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if t == 0 {
        return Err(Error::shape("max_over_time: T = 0"));
    }
    let x = input.data();
    let mut out = vec![0.0; b * f];
    let mut arg = vec![0usize; b * f];
    for bi in 0..b {
        let base = bi * t * f;
        out[bi * f..(bi + 1) * f].copy_from_slice(&x[base..base + f]);
        for ti in 1..t {
            let row = base + ti * f;
            for fi in 0..f {
                if x[row + fi] > out[bi * f + fi] {
                    out[bi * f + fi] = x[row + fi];
                    arg[bi * f + fi] = ti;
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[b, f], out)?, arg))
}

pub fn max_over_time_backward(
    input_shape: &[usize],
    argmax: &[usize],
    d_out: &Tensor,
) -> Result<Tensor> {
    let (b, t, f) = (input_shape[0], input_shape[1], input_shape[2]);
    d_out.expect_shape(&[b, f], "max_over_time_backward d_out")?;
    let mut d_input = vec![0.0; b * t * f];
    for bi in 0..b {
        for fi in 0..f {
            let ti = argmax[bi * f + fi];
            d_input[bi * t * f + ti * f + fi] += d_out.data()[bi * f + fi];
        }
    }
    Tensor::from_vec(input_shape, d_input)
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

pub fn relu_backward(x: &Tensor, d_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

pub fn tanh_act(x: &Tensor) -> Tensor {
    Tensor::from_vec(x.shape(), x.data().iter().map(|v| v.tanh()).collect()).unwrap()
}

/// Takes the forward *output* y = tanh(x).
pub fn tanh_backward(y: &Tensor, d_out: &Tensor) -> Tensor {
    let data = y.data().iter().zip(d_out.data()).map(|(&y, &d)| d * (1.0 - y * y)).collect();
    Tensor::from_vec(y.shape(), data).unwrap()
}

pub fn sigmoid_act(x: &Tensor) -> Tensor {
    let f = |v: f64| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    };
    Tensor::from_vec(x.shape(), x.data().iter().map(|&v| f(v)).collect()).unwrap()
}

/// Takes the forward *output* y = sigmoid(x).
pub fn sigmoid_backward(y: &Tensor, d_out: &Tensor) -> Tensor {
    let data = y.data().iter().zip(d_out.data()).map(|(&y, &d)| d * y * (1.0 - y)).collect();
    Tensor::from_vec(y.shape(), data).unwrap()
}

/// Per-channel batch statistics kept for the backward pass and for updating
/// running estimates. Channels are the last axis; statistics pool everything
/// else (batch, and time if present).
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub eps: f64,
}

/// Training-mode batch norm over the last axis. Needs at least 2 pooled rows.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BnCache)> {
    let c = *x.shape().last().ok_or_else(|| Error::shape("batch_norm: rank 0 input"))?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "batch_norm: {} channels, gamma {}, beta {}",
            c,
            gamma.len(),
            beta.len()
        )));
    }
    let n = x.len() / c;
    if n < 2 {
        return Err(Error::invalid("batch_norm: needs >= 2 rows to estimate statistics"));
    }
    let mut mean = vec![0.0; c];
    for row in x.data().chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; c];
    for row in x.data().chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    for s in &mut var {
        *s /= n as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; x.len()];
    for (orow, xrow) in out.chunks_mut(c).zip(x.data().chunks(c)) {
        for i in 0..c {
            orow[i] = (xrow[i] - mean[i]) * inv_std[i] * gamma.data()[i] + beta.data()[i];
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), out)?,
        BnCache { mean, var, inv_std, eps },
    ))
}

pub fn batch_norm_train_backward(
    x: &Tensor,
    gamma: &Tensor,
    cache: &BnCache,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let c = *x.shape().last().unwrap();
    let n = (x.len() / c) as f64;
    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    let mut sum_dxhat = vec![0.0; c];
    let mut sum_dxhat_xc = vec![0.0; c];
    for (xrow, drow) in x.data().chunks(c).zip(d_out.data().chunks(c)) {
        for i in 0..c {
            let xc = xrow[i] - cache.mean[i];
            let xhat = xc * cache.inv_std[i];
            d_gamma[i] += drow[i] * xhat;
            d_beta[i] += drow[i];
            let dxhat = drow[i] * gamma.data()[i];
            sum_dxhat[i] += dxhat;
            sum_dxhat_xc[i] += dxhat * xc;
        }
    }
    let mut d_x = vec![0.0; x.len()];
    for ((xrow, drow), dxrow) in
        x.data().chunks(c).zip(d_out.data().chunks(c)).zip(d_x.chunks_mut(c))
    {
        for i in 0..c {
            let xc = xrow[i] - cache.mean[i];
            let istd = cache.inv_std[i];
            let dxhat = drow[i] * gamma.data()[i];
            dxrow[i] = istd * (dxhat - sum_dxhat[i] / n - xc * istd * istd * sum_dxhat_xc[i] / n);
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), d_x)?,
        Tensor::from_vec(&[c], d_gamma)?,
        Tensor::from_vec(&[c], d_beta)?,
    ))
}

/// Inference-mode batch norm with frozen running statistics.
pub fn batch_norm_infer(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    run_mean: &[f64],
    run_var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let c = *x.shape().last().ok_or_else(|| Error::shape("batch_norm: rank 0 input"))?;
    if gamma.len() != c || run_mean.len() != c || run_var.len() != c {
        return Err(Error::shape("batch_norm_infer: channel mismatch"));
    }
    let scale: Vec<f64> = (0..c).map(|i| gamma.data()[i] / (run_var[i] + eps).sqrt()).collect();
    let mut out = vec![0.0; x.len()];
    for (orow, xrow) in out.chunks_mut(c).zip(x.data().chunks(c)) {
        for i in 0..c {
            orow[i] = (xrow[i] - run_mean[i]) * scale[i] + beta.data()[i];
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Mean softmax cross-entropy over rows. Returns (loss, probabilities).
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    logits.expect_rank(2, "softmax_xent logits")?;
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::shape(format!("softmax_xent: {} rows, {} labels", b, labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("softmax_xent: label {bad} out of range (K={k})")));
    }
    let mut probs = vec![0.0; b * k];
    let mut loss = 0.0;
    for (bi, row) in logits.data().chunks(k).enumerate() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (i, &l) in row.iter().enumerate() {
            let e = (l - mx).exp();
            probs[bi * k + i] = e;
            z += e;
        }
        for p in &mut probs[bi * k..(bi + 1) * k] {
            *p /= z;
        }
        loss += z.ln() - (row[labels[bi]] - mx);
    }
    Ok((loss / b as f64, Tensor::from_vec(&[b, k], probs)?))
}

/// d_logits for unit upstream gradient on the mean loss.
pub fn softmax_xent_backward(probs: &Tensor, labels: &[usize]) -> Tensor {
    let (b, k) = (probs.shape()[0], probs.shape()[1]);
    let mut d = probs.data().to_vec();
    for (bi, &y) in labels.iter().enumerate() {
        d[bi * k + y] -= 1.0;
    }
    let inv = 1.0 / b as f64;
    for v in &mut d {
        *v *= inv;
    }
    Tensor::from_vec(&[b, k], d).unwrap()
}

pub const BXENT_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy of probabilities against per-element targets.
/// Probabilities are clamped into `[1e-7, 1-1e-7]`; values outside `[0,1]`
/// (or NaN) are rejected. Returns (loss, clamped probabilities).
pub fn binary_xent(p: &Tensor, targets: &[f64]) -> Result<(f64, Tensor)> {
    if p.len() != targets.len() {
        return Err(Error::shape(format!(
            "binary_xent: {} probabilities, {} targets",
            p.len(),
            targets.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::shape("binary_xent: empty input"));
    }
    let mut clamped = Vec::with_capacity(p.len());
    for &v in p.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("binary_xent: probability {v} outside [0,1]")));
        }
        clamped.push(v.clamp(BXENT_CLAMP, 1.0 - BXENT_CLAMP));
    }
    let mut loss = 0.0;
    for (&pv, &y) in clamped.iter().zip(targets) {
        loss -= y * pv.ln() + (1.0 - y) * (1.0 - pv).ln();
    }
    loss /= p.len() as f64;
    Ok((loss, Tensor::from_vec(p.shape(), clamped)?))
}

/// d_p for unit upstream gradient on the mean loss (uses clamped p).
pub fn binary_xent_backward(clamped: &Tensor, targets: &[f64]) -> Tensor {
    let n = clamped.len() as f64;
    let d: Vec<f64> = clamped
        .data()
        .iter()
        .zip(targets)
        .map(|(&p, &y)| (-(y / p) + (1.0 - y) / (1.0 - p)) / n)
        .collect();
    Tensor::from_vec(clamped.shape(), d).unwrap()
}

/// Mask mixing `m*z + (1-m)*h` elementwise; all three shapes must agree.
pub fn mask_mix(h: &Tensor, z: &Tensor, m: &Tensor) -> Result<Tensor> {
    if h.shape() != z.shape() || h.shape() != m.shape() {
        return Err(Error::shape(format!(
            "mask_mix: h {:?}, z {:?}, m {:?}",
            h.shape(),
            z.shape(),
            m.shape()
        )));
    }
    let data = h
        .data()
        .iter()
        .zip(z.data())
        .zip(m.data())
        .map(|((&h, &z), &m)| m * z + (1.0 - m) * h)
        .collect();
    Tensor::from_vec(h.shape(), data)
}

/// (d_h, d_z) for `mask_mix`; the mask itself is non-differentiable data.
pub fn mask_mix_backward(m: &Tensor, d_out: &Tensor) -> (Tensor, Tensor) {
    let d_h = m.data().iter().zip(d_out.data()).map(|(&m, &d)| (1.0 - m) * d).collect();
    let d_z = m.data().iter().zip(d_out.data()).map(|(&m, &d)| m * d).collect();
    (
        Tensor::from_vec(m.shape(), d_h).unwrap(),
        Tensor::from_vec(m.shape(), d_z).unwrap(),
    )
}

/// Scale each position of the last axis by `s`: `y[..., c] = x[..., c] * s[c]`.
pub fn col_scale(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let c = *x.shape().last().ok_or_else(|| Error::shape("col_scale: rank 0 input"))?;
    if s.len() != c {
        return Err(Error::shape(format!("col_scale: {} channels, scale {}", c, s.len())));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        for (v, sv) in row.iter_mut().zip(s.data()) {
            *v *= sv;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// (d_x, d_s) for `col_scale`.
pub fn col_scale_backward(x: &Tensor, s: &Tensor, d_out: &Tensor) -> (Tensor, Tensor) {
    let c = s.len();
    let mut d_x = d_out.data().to_vec();
    for row in d_x.chunks_mut(c) {
        for (v, sv) in row.iter_mut().zip(s.data()) {
            *v *= sv;
        }
    }
    let mut d_s = vec![0.0; c];
    for (xrow, drow) in x.data().chunks(c).zip(d_out.data().chunks(c)) {
        for i in 0..c {
            d_s[i] += xrow[i] * drow[i];
        }
    }
    (
        Tensor::from_vec(x.shape(), d_x).unwrap(),
        Tensor::from_vec(&[c], d_s).unwrap(),
    )
}
