//! Forward layer kernels.
//!
//! All kernels are plain sequential loops over row-major `[h, w, c]` images
//! (weights `[kh, kw, c_in, c_out]`, dense `[in, out]`), so identical inputs
//! give bit-identical outputs.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Pooling window geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolParams {
    pub size: usize,
    pub stride: usize,
}

/// The primitive vocabulary every model in this crate is built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OpKind {
    Dense,
    Conv2d { stride: usize, pad: usize },
    DepthwiseConv2d { stride: usize, pad: usize },
    Relu,
    MaxPool(PoolParams),
    AvgPool(PoolParams),
    Softmax,
    Add,
    Flatten,
    CrossEntropyLoss { target: usize },
}

/// Execute one primitive without recording.
///
/// `inputs` carries the data tensor first, then parameter tensors where the
/// op has them (`Dense`/`Conv2d`/`DepthwiseConv2d`: weights then bias; `Add`:
/// the two summands).
pub fn forward_primitive(op: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    for (i, t) in inputs.iter().enumerate() {
        if !t.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite value in input {i} of {op:?}"
            )));
        }
    }
    let need = |n: usize| -> Result<()> {
        if inputs.len() != n {
            return Err(Error::invalid_argument(format!(
                "{op:?} expects {n} inputs, got {}",
                inputs.len()
            )));
        }
        Ok(())
    };
    match op {
        OpKind::Dense => {
            need(3)?;
            dense(inputs[0], inputs[1], inputs[2])
        }
        OpKind::Conv2d { stride, pad } => {
            need(3)?;
            conv2d(inputs[0], inputs[1], inputs[2], stride, pad)
        }
        OpKind::DepthwiseConv2d { stride, pad } => {
            need(3)?;
            depthwise_conv2d(inputs[0], inputs[1], inputs[2], stride, pad)
        }
        OpKind::Relu => {
            need(1)?;
            Ok(relu(inputs[0]))
        }
        OpKind::MaxPool(p) => {
            need(1)?;
            max_pool(inputs[0], p).map(|(t, _)| t)
        }
        OpKind::AvgPool(p) => {
            need(1)?;
            avg_pool(inputs[0], p)
        }
        OpKind::Softmax => {
            need(1)?;
            Ok(softmax(inputs[0]))
        }
        OpKind::Add => {
            need(2)?;
            inputs[0].zip_map(inputs[1], |a, b| a + b)
        }
        OpKind::Flatten => {
            need(1)?;
            Ok(flatten(inputs[0]))
        }
        OpKind::CrossEntropyLoss { target } => {
            need(1)?;
            cross_entropy_loss(inputs[0], target).map(|(l, _)| l)
        }
    }
}

pub(crate) fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n_in = x.numel();
    if w.shape().len() != 2 || w.shape()[0] != n_in {
        return Err(Error::shape_mismatch(format!(
            "dense: input {n_in} vs weight {:?}",
            w.shape()
        )));
    }
    let n_out = w.shape()[1];
    if b.numel() != n_out {
        return Err(Error::shape_mismatch(format!(
            "dense: bias {} vs {n_out} outputs",
            b.numel()
        )));
    }
    let mut out = vec![0.0f32; n_out];
    for (o, out_v) in out.iter_mut().enumerate() {
        let mut acc = b.data()[o];
        for i in 0..n_in {
            acc += x.data()[i] * w.data()[i * n_out + o];
        }
        *out_v = acc;
    }
    Ok(Tensor::from_parts(vec![n_out], out))
}

fn conv_out_dim(in_dim: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid_argument("stride must be positive"));
    }
    let padded = in_dim + 2 * pad;
    if padded < k {
        return Err(Error::shape_mismatch(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn image_dims(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::shape_mismatch(format!(
            "{what}: expected [h, w, c] image, got {s:?}"
        ))),
    }
}

pub(crate) fn conv2d(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (h, w, c_in) = image_dims(x, "conv2d")?;
    let [kh, kw, kc_in, c_out] = *kernel.shape() else {
        return Err(Error::shape_mismatch(format!(
            "conv2d kernel: expected [kh, kw, c_in, c_out], got {:?}",
            kernel.shape()
        )));
    };
    if kc_in != c_in {
        return Err(Error::shape_mismatch(format!(
            "conv2d: input has {c_in} channels, kernel expects {kc_in}"
        )));
    }
    if bias.numel() != c_out {
        return Err(Error::shape_mismatch("conv2d: bias/out-channel mismatch"));
    }
    let oh = conv_out_dim(h, kh, stride, pad)?;
    let ow = conv_out_dim(w, kw, stride, pad)?;
    let mut out = vec![0.0f32; oh * ow * c_out];
    for oy in 0..oh {
        for ox in 0..ow {
            for oc in 0..c_out {
                let mut acc = bias.data()[oc];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let x_base = (iy as usize * w + ix as usize) * c_in;
                        let k_base = ((ky * kw + kx) * c_in) * c_out;
                        for ic in 0..c_in {
                            acc += x.data()[x_base + ic]
                                * kernel.data()[k_base + ic * c_out + oc];
                        }
                    }
                }
                out[(oy * ow + ox) * c_out + oc] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow, c_out], out))
}

pub(crate) fn depthwise_conv2d(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (h, w, c) = image_dims(x, "depthwise_conv2d")?;
    let [kh, kw, kc] = *kernel.shape() else {
        return Err(Error::shape_mismatch(format!(
            "depthwise kernel: expected [kh, kw, c], got {:?}",
            kernel.shape()
        )));
    };
    if kc != c || bias.numel() != c {
        return Err(Error::shape_mismatch(
            "depthwise_conv2d: channel mismatch",
        ));
    }
    let oh = conv_out_dim(h, kh, stride, pad)?;
    let ow = conv_out_dim(w, kw, stride, pad)?;
    let mut out = vec![0.0f32; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = bias.data()[ch];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += x.data()[(iy as usize * w + ix as usize) * c + ch]
                            * kernel.data()[(ky * kw + kx) * c + ch];
                    }
                }
                out[(oy * ow + ox) * c + ch] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow, c], out))
}

pub(crate) fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Max pooling; also returns the flat input index chosen per output element
/// (ties take the first in row-major scan order) for the backward pass.
pub(crate) fn max_pool(x: &Tensor, p: PoolParams) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = image_dims(x, "max_pool")?;
    let oh = conv_out_dim(h, p.size, p.stride, 0)?;
    let ow = conv_out_dim(w, p.size, p.stride, 0)?;
    let mut out = vec![0.0f32; oh * ow * c];
    let mut argmax = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ky in 0..p.size {
                    for kx in 0..p.size {
                        let iy = oy * p.stride + ky;
                        let ix = ox * p.stride + kx;
                        let idx = (iy * w + ix) * c + ch;
                        if x.data()[idx] > best {
                            best = x.data()[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((Tensor::from_parts(vec![oh, ow, c], out), argmax))
}

pub(crate) fn avg_pool(x: &Tensor, p: PoolParams) -> Result<Tensor> {
    let (h, w, c) = image_dims(x, "avg_pool")?;
    let oh = conv_out_dim(h, p.size, p.stride, 0)?;
    let ow = conv_out_dim(w, p.size, p.stride, 0)?;
    let inv = 1.0 / (p.size * p.size) as f32;
    let mut out = vec![0.0f32; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for ky in 0..p.size {
                    for kx in 0..p.size {
                        acc += x.data()[((oy * p.stride + ky) * w + ox * p.stride + kx) * c + ch];
                    }
                }
                out[(oy * ow + ox) * c + ch] = acc * inv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow, c], out))
}

/// Softmax over the last axis, max-shifted for stability.
pub(crate) fn softmax(x: &Tensor) -> Tensor {
    let row = *x.shape().last().unwrap();
    let mut out = vec![0.0f32; x.numel()];
    for (r, chunk) in x.data().chunks(row).enumerate() {
        let m = chunk.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (i, &v) in chunk.iter().enumerate() {
            let e = (v - m).exp();
            out[r * row + i] = e;
            sum += e;
        }
        for v in &mut out[r * row..(r + 1) * row] {
            *v /= sum;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn flatten(x: &Tensor) -> Tensor {
    Tensor::from_parts(vec![x.numel()], x.data().to_vec())
}

/// Fused softmax + cross-entropy on a 1-D logit vector.
///
/// Returns the scalar loss and the softmax probabilities (the backward pass
/// is `probs - onehot(target)`).
pub(crate) fn cross_entropy_loss(logits: &Tensor, target: usize) -> Result<(Tensor, Tensor)> {
    if logits.shape().len() != 1 {
        return Err(Error::shape_mismatch(
            "cross_entropy_loss expects 1-D logits",
        ));
    }
    if target >= logits.numel() {
        return Err(Error::invalid_argument(format!(
            "target {target} out of range for {} classes",
            logits.numel()
        )));
    }
    let m = logits.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let sum_exp: f32 = logits.data().iter().map(|&v| (v - m).exp()).sum();
    let loss = m + sum_exp.ln() - logits.data()[target];
    Ok((Tensor::scalar(loss), softmax(logits)))
}
