//! Quantized models: integer inference kernels with fixed-point
//! requantization, the fake-quant float oracle, and dequantization back to a
//! float graph.

use serde::{Deserialize, Serialize};

use super::{dequantize_tensor, quantize_tensor, IntTensor, QuantParams, Requant};
use crate::error::{Error, Result};
use crate::model::{Classify, Dataset, LayerSpec, GraphNode, ModelGraph, NodeInput};
use crate::quant::calibrate::{calibrate, ModelQuantParams};
use crate::tensor::{forward_primitive, OpKind, Tensor};

/// How a node's accumulator maps onto its output lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub(crate) enum RequantOp {
    /// One multiplier: conv/dense (S_in*S_w/S_out), relu/maxpool (S_in/S_out),
    /// avgpool (S_in/(S_out*k*k)).
    Single(Requant),
    /// Residual add: both operands rescaled onto a fine lattice of
    /// S_out/2^shift, summed, then rounded down by `shift` bits.
    Add { a: Requant, b: Requant, shift: u32 },
    /// Codes pass through unchanged (flatten).
    Identity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct QNode {
    pub layer: LayerSpec,
    pub inputs: Vec<NodeInput>,
    pub weights: Option<IntTensor>,
    pub weight_params: Option<QuantParams>,
    /// Bias codes at scale S_in*S_w, zero-point 0 (int32, not clamped to the
    /// activation bit-width).
    pub bias: Option<IntTensor>,
    pub out_params: QuantParams,
    pub requant: RequantOp,
    /// Worst-case |accumulator| provably fits the width limit, so the MAC
    /// loop can skip per-step checks.
    pub acc_statically_safe: bool,
}

/// Integer model: structure plus per-tensor quantization parameters and
/// requantization multipliers. Immutable after construction; safe to share
/// across threads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub(crate) input_shape: Vec<usize>,
    pub(crate) num_classes: usize,
    pub(crate) bits: u8,
    pub(crate) input_params: QuantParams,
    pub(crate) nodes: Vec<QNode>,
}

impl QuantizedModel {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn input_params(&self) -> &QuantParams {
        &self.input_params
    }

    pub fn logits_params(&self) -> &QuantParams {
        &self.nodes.last().expect("non-empty graph").out_params
    }

    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        Ok(integer_infer(self, x)?.1)
    }
}

impl Classify for QuantizedModel {
    fn classify(&self, x: &Tensor) -> usize {
        integer_infer(self, x).map(|(l, _)| l.argmax()).unwrap_or(0)
    }
}

fn add_shift(bits: u8) -> u32 {
    if bits == 8 {
        20
    } else {
        12
    }
}

/// Quantize a float model post-training: calibrate ranges, snap weights,
/// derive requantization multipliers per layer.
pub fn quantize_model(model: &ModelGraph, calib: &Dataset, bits: u8) -> Result<QuantizedModel> {
    let mqp = calibrate(model, calib, bits)?;
    quantize_model_with(model, &mqp)
}

pub(crate) fn quantize_model_with(model: &ModelGraph, mqp: &ModelQuantParams) -> Result<QuantizedModel> {
    let bits = mqp.bits;
    let operand_params = |input: &NodeInput, mqp: &ModelQuantParams| -> QuantParams {
        match input {
            NodeInput::NetworkInput => mqp.input,
            NodeInput::Node(i) => mqp.node_outputs[*i],
        }
    };
    let mut nodes = Vec::with_capacity(model.nodes().len());
    for (idx, node) in model.nodes().iter().enumerate() {
        let in_params = operand_params(&node.inputs[0], mqp);
        let mut out_params = mqp.node_outputs[idx];
        let (weights, weight_params, bias) = match node.params.first() {
            Some(w) => {
                let wp = mqp.weights[idx].expect("calibrated weight params");
                let wq = quantize_tensor(w, &wp);
                let b = &node.params[1];
                let bias_scale = in_params.scale * wp.scale;
                let bias_codes: Vec<i32> = b
                    .data()
                    .iter()
                    .map(|&v| {
                        (v as f64 / bias_scale)
                            .round()
                            .clamp(i32::MIN as f64, i32::MAX as f64) as i32
                    })
                    .collect();
                (
                    Some(wq),
                    Some(wp),
                    Some(IntTensor { shape: b.shape().to_vec(), data: bias_codes }),
                )
            }
            None => (None, None, None),
        };
        let requant = match node.layer {
            LayerSpec::Conv2d { .. } | LayerSpec::DepthwiseConv2d { .. } | LayerSpec::Dense { .. } => {
                let wp = weight_params.as_ref().unwrap();
                RequantOp::Single(Requant::from_real(
                    in_params.scale * wp.scale / out_params.scale,
                )?)
            }
            LayerSpec::Relu | LayerSpec::MaxPool { .. } => {
                RequantOp::Single(Requant::from_real(in_params.scale / out_params.scale)?)
            }
            LayerSpec::AvgPool { size, .. } => RequantOp::Single(Requant::from_real(
                in_params.scale / (out_params.scale * (size * size) as f64),
            )?),
            LayerSpec::Flatten => {
                out_params = in_params;
                RequantOp::Identity
            }
            LayerSpec::Add => {
                let b_params = operand_params(&node.inputs[1], mqp);
                let shift = add_shift(bits);
                let fine = out_params.scale / (1u64 << shift) as f64;
                RequantOp::Add {
                    a: Requant::from_real(in_params.scale / fine)?,
                    b: Requant::from_real(b_params.scale / fine)?,
                    shift,
                }
            }
        };
        let acc_statically_safe = {
            let limit = Acc::limit_for(bits) as i128;
            let max_in = (in_params.qmax() as i64 - in_params.zero_point as i64)
                .abs()
                .max((in_params.qmin() as i64 - in_params.zero_point as i64).abs())
                as i128;
            match (&weights, &bias) {
                (Some(w), Some(b)) => {
                    let sum_w: i128 = w.data.iter().map(|&v| (v as i128).abs()).sum();
                    let max_b: i128 =
                        b.data.iter().map(|&v| (v as i128).abs()).max().unwrap_or(0);
                    max_b + sum_w * max_in <= limit
                }
                // Parameter-free layers: avg pool sums a window of codes; the
                // residual add sums two fine-lattice rescales.
                _ => match (node.layer, requant) {
                    (LayerSpec::AvgPool { size, .. }, _) => {
                        (size * size) as i128 * max_in <= limit
                    }
                    (LayerSpec::Add, RequantOp::Add { a, b, .. }) => {
                        let b_params = operand_params(&node.inputs[1], mqp);
                        let max_b = (b_params.qmax() as i64 - b_params.zero_point as i64)
                            .abs()
                            .max((b_params.qmin() as i64 - b_params.zero_point as i64).abs())
                            as i128;
                        let bound_a = (a.real() * max_in as f64).abs().ceil() as i128 + 1;
                        let bound_b = (b.real() * max_b as f64).abs().ceil() as i128 + 1;
                        bound_a + bound_b <= limit
                    }
                    _ => max_in <= limit,
                },
            }
        };
        nodes.push(QNode {
            layer: node.layer,
            inputs: node.inputs.clone(),
            weights,
            weight_params,
            bias,
            out_params,
            requant,
            acc_statically_safe,
        });
    }
    Ok(QuantizedModel {
        input_shape: model.input_shape().to_vec(),
        num_classes: model.num_classes(),
        bits,
        input_params: mqp.input,
        nodes,
    })
}

/// Checked integer accumulator. 8-bit kernels accumulate in int32; 16-bit
/// kernels get an int48-bounded 64-bit accumulator, matching the widened
/// accumulators the reference 16x8 kernels use (int16 products alone exceed
/// int32). Exceeding the bound is an error, never a silent wrap.
struct Acc {
    value: i64,
    limit: i64,
    layer: usize,
    kind: &'static str,
    /// Per-step checking disabled when the layer's worst-case accumulator
    /// provably fits the width limit.
    checked: bool,
}

impl Acc {
    fn limit_for(bits: u8) -> i64 {
        if bits == 8 {
            i32::MAX as i64
        } else {
            (1i64 << 47) - 1
        }
    }

    fn new(start: i64, bits: u8, layer: usize, kind: &'static str, checked: bool) -> Result<Self> {
        let acc = Acc { value: start, limit: Self::limit_for(bits), layer, kind, checked };
        acc.check()?;
        Ok(acc)
    }

    #[inline(always)]
    fn add(&mut self, v: i64) -> Result<()> {
        self.value += v;
        if self.checked {
            self.check()?;
        }
        Ok(())
    }

    #[inline(never)]
    fn overflow_error(&self) -> Error {
        Error::InternalOverflow { layer: self.layer, kind: self.kind.to_string() }
    }

    fn check(&self) -> Result<()> {
        if self.value > self.limit || self.value < -self.limit - 1 {
            return Err(self.overflow_error());
        }
        Ok(())
    }
}

fn clamp_code(code: i64, p: &QuantParams) -> i32 {
    code.clamp(p.qmin() as i64, p.qmax() as i64) as i32
}

fn rounding_shift(v: i64, shift: u32) -> i64 {
    if shift == 0 {
        return v;
    }
    let half = 1i64 << (shift - 1);
    if v >= 0 {
        (v + half) >> shift
    } else {
        -((-v + half) >> shift)
    }
}

/// Run the integer kernels on one input in the `[0, 1]` pixel domain.
///
/// The input is quantized with the model's input parameters; all layer
/// arithmetic happens on integers with int32 accumulators; the dequantized
/// logits and their softmax are returned.
pub fn integer_infer(qm: &QuantizedModel, x: &Tensor) -> Result<(Tensor, Tensor)> {
    if x.shape() != qm.input_shape.as_slice() {
        return Err(Error::shape_mismatch(format!(
            "input {:?} vs model input {:?}",
            x.shape(),
            qm.input_shape
        )));
    }
    let x_codes = quantize_tensor(x, &qm.input_params);
    let mut outputs: Vec<IntTensor> = Vec::with_capacity(qm.nodes.len());

    for (layer_idx, node) in qm.nodes.iter().enumerate() {
        let operand = |input: &NodeInput| -> (&IntTensor, &QuantParams) {
            match input {
                NodeInput::NetworkInput => (&x_codes, &qm.input_params),
                NodeInput::Node(i) => (&outputs[*i], &qm.nodes[*i].out_params),
            }
        };
        let (inp, in_params) = operand(&node.inputs[0]);
        let zp_in = in_params.zero_point as i64;
        let out_p = &node.out_params;
        let zp_out = out_p.zero_point as i64;

        let out = match node.layer {
            LayerSpec::Dense { units } => {
                let RequantOp::Single(req) = node.requant else { unreachable!() };
                let w = node.weights.as_ref().unwrap();
                let bias = node.bias.as_ref().unwrap();
                let n_in = inp.numel();
                let mut data = vec![0i32; units];
                for (o, slot) in data.iter_mut().enumerate() {
                    let mut acc = Acc::new(bias.data[o] as i64, qm.bits, layer_idx, "dense", !node.acc_statically_safe)?;
                    for i in 0..n_in {
                        acc.add((inp.data[i] as i64 - zp_in) * w.data[i * units + o] as i64)?;
                    }
                    *slot = clamp_code(req.apply(acc.value) + zp_out, out_p);
                }
                IntTensor { shape: vec![units], data }
            }
            LayerSpec::Conv2d { out_channels, kernel, stride, pad } => {
                let RequantOp::Single(req) = node.requant else { unreachable!() };
                let w = node.weights.as_ref().unwrap();
                let bias = node.bias.as_ref().unwrap();
                let (h, wd, c_in) = (inp.shape[0], inp.shape[1], inp.shape[2]);
                let oh = (h + 2 * pad - kernel) / stride + 1;
                let ow = (wd + 2 * pad - kernel) / stride + 1;
                let mut data = vec![0i32; oh * ow * out_channels];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for oc in 0..out_channels {
                            let mut acc = Acc::new(bias.data[oc] as i64, qm.bits, layer_idx, "conv2d", !node.acc_statically_safe)?;
                            for ky in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kernel {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let x_base = (iy as usize * wd + ix as usize) * c_in;
                                    let k_base = ((ky * kernel + kx) * c_in) * out_channels;
                                    for ic in 0..c_in {
                                        acc.add(
                                            (inp.data[x_base + ic] as i64 - zp_in)
                                                * w.data[k_base + ic * out_channels + oc] as i64,
                                        )?;
                                    }
                                }
                            }
                            data[(oy * ow + ox) * out_channels + oc] =
                                clamp_code(req.apply(acc.value) + zp_out, out_p);
                        }
                    }
                }
                IntTensor { shape: vec![oh, ow, out_channels], data }
            }
            LayerSpec::DepthwiseConv2d { kernel, stride, pad } => {
                let RequantOp::Single(req) = node.requant else { unreachable!() };
                let w = node.weights.as_ref().unwrap();
                let bias = node.bias.as_ref().unwrap();
                let (h, wd, c) = (inp.shape[0], inp.shape[1], inp.shape[2]);
                let oh = (h + 2 * pad - kernel) / stride + 1;
                let ow = (wd + 2 * pad - kernel) / stride + 1;
                let mut data = vec![0i32; oh * ow * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let mut acc = Acc::new(bias.data[ch] as i64, qm.bits, layer_idx, "depthwise", !node.acc_statically_safe)?;
                            for ky in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kernel {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc.add(
                                        (inp.data[(iy as usize * wd + ix as usize) * c + ch] as i64
                                            - zp_in)
                                            * w.data[(ky * kernel + kx) * c + ch] as i64,
                                    )?;
                                }
                            }
                            data[(oy * ow + ox) * c + ch] =
                                clamp_code(req.apply(acc.value) + zp_out, out_p);
                        }
                    }
                }
                IntTensor { shape: vec![oh, ow, c], data }
            }
            LayerSpec::Relu => {
                let RequantOp::Single(req) = node.requant else { unreachable!() };
                let data = inp
                    .data
                    .iter()
                    .map(|&q| {
                        let v = (q as i64 - zp_in).max(0);
                        clamp_code(req.apply(v) + zp_out, out_p)
                    })
                    .collect();
                IntTensor { shape: inp.shape.clone(), data }
            }
            LayerSpec::MaxPool { size, stride } => {
                let RequantOp::Single(req) = node.requant else { unreachable!() };
                let (h, wd, c) = (inp.shape[0], inp.shape[1], inp.shape[2]);
                let oh = (h - size) / stride + 1;
                let ow = (wd - size) / stride + 1;
                let mut data = vec![0i32; oh * ow * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let mut m = i32::MIN;
                            for ky in 0..size {
                                for kx in 0..size {
                                    let v = inp.data
                                        [((oy * stride + ky) * wd + ox * stride + kx) * c + ch];
                                    m = m.max(v);
                                }
                            }
                            data[(oy * ow + ox) * c + ch] =
                                clamp_code(req.apply(m as i64 - zp_in) + zp_out, out_p);
                        }
                    }
                }
                IntTensor { shape: vec![oh, ow, c], data }
            }
            LayerSpec::AvgPool { size, stride } => {
                let RequantOp::Single(req) = node.requant else { unreachable!() };
                let (h, wd, c) = (inp.shape[0], inp.shape[1], inp.shape[2]);
                let oh = (h - size) / stride + 1;
                let ow = (wd - size) / stride + 1;
                let mut data = vec![0i32; oh * ow * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let mut acc = Acc::new(0, qm.bits, layer_idx, "avgpool", !node.acc_statically_safe)?;
                            for ky in 0..size {
                                for kx in 0..size {
                                    acc.add(
                                        inp.data[((oy * stride + ky) * wd + ox * stride + kx) * c
                                            + ch] as i64
                                            - zp_in,
                                    )?;
                                }
                            }
                            data[(oy * ow + ox) * c + ch] =
                                clamp_code(req.apply(acc.value) + zp_out, out_p);
                        }
                    }
                }
                IntTensor { shape: vec![oh, ow, c], data }
            }
            LayerSpec::Add => {
                let RequantOp::Add { a, b, shift } = node.requant else { unreachable!() };
                let (rhs, rhs_params) = operand(&node.inputs[1]);
                let zp_b = rhs_params.zero_point as i64;
                let mut data = vec![0i32; inp.numel()];
                for (i, slot) in data.iter_mut().enumerate() {
                    let fine_a = a.apply(inp.data[i] as i64 - zp_in);
                    let fine_b = b.apply(rhs.data[i] as i64 - zp_b);
                    let mut acc = Acc::new(fine_a, qm.bits, layer_idx, "add", !node.acc_statically_safe)?;
                    acc.add(fine_b)?;
                    *slot = clamp_code(rounding_shift(acc.value, shift) + zp_out, out_p);
                }
                IntTensor { shape: inp.shape.clone(), data }
            }
            LayerSpec::Flatten => IntTensor { shape: vec![inp.numel()], data: inp.data.clone() },
        };
        outputs.push(out);
    }

    let last = outputs.last().unwrap();
    let logits = dequantize_tensor(last, &qm.nodes.last().unwrap().out_params);
    let probs = forward_primitive(OpKind::Softmax, &[&logits])?;
    Ok((logits, probs))
}

/// Snap a real value onto a lattice, f64 throughout.
fn snap(v: f64, p: &QuantParams) -> f64 {
    let q = (v / p.scale).round() as i64 + p.zero_point as i64;
    let q = q.clamp(p.qmin() as i64, p.qmax() as i64);
    (q - p.zero_point as i64) as f64 * p.scale
}

/// Float simulation of the integer kernels: a forward pass over the snapped
/// weights inserting quantize-dequantize at every tensor boundary.
///
/// Accumulation runs in f64 so the simulated sums equal the exact integer
/// accumulators; the only rounding happens at the lattice boundaries, which
/// is what makes this usable as a one-LSB conformance oracle.
pub fn fake_quant_infer(qm: &QuantizedModel, x: &Tensor) -> Result<Tensor> {
    if x.shape() != qm.input_shape.as_slice() {
        return Err(Error::shape_mismatch(format!(
            "input {:?} vs model input {:?}",
            x.shape(),
            qm.input_shape
        )));
    }
    let x0: Vec<f64> = x.data().iter().map(|&v| snap(v as f64, &qm.input_params)).collect();
    let mut outputs: Vec<(Vec<f64>, Vec<usize>)> = Vec::with_capacity(qm.nodes.len());

    for node in &qm.nodes {
        let operand = |input: &NodeInput| -> (&[f64], &[usize]) {
            match input {
                NodeInput::NetworkInput => (&x0, qm.input_shape.as_slice()),
                NodeInput::Node(i) => (&outputs[*i].0, &outputs[*i].1),
            }
        };
        let (inp, in_shape) = operand(&node.inputs[0]);
        let out_p = &node.out_params;
        let wp = node.weight_params.as_ref();
        let w_dq: Option<Vec<f64>> = node.weights.as_ref().map(|w| {
            w.data.iter().map(|&q| q as f64 * wp.unwrap().scale).collect()
        });
        let in_params = match &node.inputs[0] {
            NodeInput::NetworkInput => &qm.input_params,
            NodeInput::Node(i) => &qm.nodes[*i].out_params,
        };
        let bias_dq: Option<Vec<f64>> = node.bias.as_ref().map(|b| {
            let s = in_params.scale * wp.unwrap().scale;
            b.data.iter().map(|&q| q as f64 * s).collect()
        });

        let (raw, shape): (Vec<f64>, Vec<usize>) = match node.layer {
            LayerSpec::Dense { units } => {
                let w = w_dq.as_ref().unwrap();
                let b = bias_dq.as_ref().unwrap();
                let n_in = inp.len();
                let mut out = vec![0.0f64; units];
                for (o, slot) in out.iter_mut().enumerate() {
                    let mut acc = b[o];
                    for i in 0..n_in {
                        acc += inp[i] * w[i * units + o];
                    }
                    *slot = acc;
                }
                (out, vec![units])
            }
            LayerSpec::Conv2d { out_channels, kernel, stride, pad } => {
                let w = w_dq.as_ref().unwrap();
                let b = bias_dq.as_ref().unwrap();
                let (h, wd, c_in) = (in_shape[0], in_shape[1], in_shape[2]);
                let oh = (h + 2 * pad - kernel) / stride + 1;
                let ow = (wd + 2 * pad - kernel) / stride + 1;
                let mut out = vec![0.0f64; oh * ow * out_channels];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for oc in 0..out_channels {
                            let mut acc = b[oc];
                            for ky in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kernel {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let x_base = (iy as usize * wd + ix as usize) * c_in;
                                    let k_base = ((ky * kernel + kx) * c_in) * out_channels;
                                    for ic in 0..c_in {
                                        acc += inp[x_base + ic] * w[k_base + ic * out_channels + oc];
                                    }
                                }
                            }
                            out[(oy * ow + ox) * out_channels + oc] = acc;
                        }
                    }
                }
                (out, vec![oh, ow, out_channels])
            }
            LayerSpec::DepthwiseConv2d { kernel, stride, pad } => {
                let w = w_dq.as_ref().unwrap();
                let b = bias_dq.as_ref().unwrap();
                let (h, wd, c) = (in_shape[0], in_shape[1], in_shape[2]);
                let oh = (h + 2 * pad - kernel) / stride + 1;
                let ow = (wd + 2 * pad - kernel) / stride + 1;
                let mut out = vec![0.0f64; oh * ow * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let mut acc = b[ch];
                            for ky in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kernel {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += inp[(iy as usize * wd + ix as usize) * c + ch]
                                        * w[(ky * kernel + kx) * c + ch];
                                }
                            }
                            out[(oy * ow + ox) * c + ch] = acc;
                        }
                    }
                }
                (out, vec![oh, ow, c])
            }
            LayerSpec::Relu => (inp.iter().map(|&v| v.max(0.0)).collect(), in_shape.to_vec()),
            LayerSpec::MaxPool { size, stride } => {
                let (h, wd, c) = (in_shape[0], in_shape[1], in_shape[2]);
                let oh = (h - size) / stride + 1;
                let ow = (wd - size) / stride + 1;
                let mut out = vec![0.0f64; oh * ow * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let mut m = f64::NEG_INFINITY;
                            for ky in 0..size {
                                for kx in 0..size {
                                    m = m.max(
                                        inp[((oy * stride + ky) * wd + ox * stride + kx) * c + ch],
                                    );
                                }
                            }
                            out[(oy * ow + ox) * c + ch] = m;
                        }
                    }
                }
                (out, vec![oh, ow, c])
            }
            LayerSpec::AvgPool { size, stride } => {
                let (h, wd, c) = (in_shape[0], in_shape[1], in_shape[2]);
                let oh = (h - size) / stride + 1;
                let ow = (wd - size) / stride + 1;
                let inv = 1.0 / (size * size) as f64;
                let mut out = vec![0.0f64; oh * ow * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let mut acc = 0.0;
                            for ky in 0..size {
                                for kx in 0..size {
                                    acc +=
                                        inp[((oy * stride + ky) * wd + ox * stride + kx) * c + ch];
                                }
                            }
                            out[(oy * ow + ox) * c + ch] = acc * inv;
                        }
                    }
                }
                (out, vec![oh, ow, c])
            }
            LayerSpec::Add => {
                let (rhs, _) = operand(&node.inputs[1]);
                (
                    inp.iter().zip(rhs).map(|(&a, &b)| a + b).collect(),
                    in_shape.to_vec(),
                )
            }
            LayerSpec::Flatten => (inp.to_vec(), vec![inp.len()]),
        };

        let snapped: Vec<f64> = if matches!(node.layer, LayerSpec::Flatten) {
            raw
        } else {
            raw.iter().map(|&v| snap(v, out_p)).collect()
        };
        outputs.push((snapped, shape));
    }

    let (last, shape) = outputs.pop().unwrap();
    Tensor::new(shape, last.iter().map(|&v| v as f32).collect())
}

/// Float model whose forward pass equals fake-quant inference without the
/// activation snapping: weights and biases already sit on their lattices.
pub fn dequantize_model(qm: &QuantizedModel) -> Result<ModelGraph> {
    let mut nodes = Vec::with_capacity(qm.nodes.len());
    for node in &qm.nodes {
        let mut params = Vec::new();
        if let (Some(w), Some(wp)) = (&node.weights, &node.weight_params) {
            params.push(dequantize_tensor(w, wp));
            let in_params = match &node.inputs[0] {
                NodeInput::NetworkInput => &qm.input_params,
                NodeInput::Node(i) => &qm.nodes[*i].out_params,
            };
            let bias = node.bias.as_ref().unwrap();
            let s = in_params.scale * wp.scale;
            params.push(Tensor::new(
                bias.shape.clone(),
                bias.data.iter().map(|&q| (q as f64 * s) as f32).collect(),
            )?);
        }
        nodes.push(GraphNode { layer: node.layer, inputs: node.inputs.clone(), params });
    }
    ModelGraph::new(qm.input_shape.clone(), qm.num_classes, nodes)
}

/// The exact sample a quantized model perceives: the adversarial input
/// snapped onto the model's input lattice.
pub fn quantize_adversarial_input(x_adv: &Tensor, qm: &QuantizedModel) -> Tensor {
    dequantize_tensor(&quantize_tensor(x_adv, &qm.input_params), &qm.input_params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::dataset::{synthetic_shapes, Split};
    use crate::model::build_toy_resnet_seeded;

    fn unit_params(bits: u8) -> QuantParams {
        QuantParams { scale: 1.0, zero_point: 0, bits, symmetric: false }
    }

    #[test]
    fn identity_dense_passes_codes_through() {
        let n = 4;
        let mut w = vec![0i32; n * n];
        for i in 0..n {
            w[i * n + i] = 1;
        }
        let qm = QuantizedModel {
            input_shape: vec![n],
            num_classes: n,
            bits: 8,
            input_params: unit_params(8),
            nodes: vec![QNode {
                layer: LayerSpec::Dense { units: n },
                inputs: vec![NodeInput::NetworkInput],
                weights: Some(IntTensor { shape: vec![n, n], data: w }),
                weight_params: Some(QuantParams { scale: 1.0, zero_point: 0, bits: 8, symmetric: true }),
                bias: Some(IntTensor { shape: vec![n], data: vec![0; n] }),
                out_params: unit_params(8),
                requant: RequantOp::Single(Requant::from_real(1.0).unwrap()),
                acc_statically_safe: false,
            }],
        };
        let x = Tensor::new(vec![n], vec![0.0, 1.0, 3.0, 127.0]).unwrap();
        let (logits, _) = integer_infer(&qm, &x).unwrap();
        assert_eq!(logits.data(), &[0.0, 1.0, 3.0, 127.0]);
    }

    #[test]
    fn bucketed_inputs_give_identical_outputs() {
        let model = build_toy_resnet_seeded(&[16, 16, 3], 10, 3).unwrap();
        let calib = synthetic_shapes(8, 10, 16, 3, 0.05, 7, Split::Calibration).unwrap();
        let qm = quantize_model(&model, &calib, 8).unwrap();
        // Start from a lattice-centered image so a 0.4-LSB shift cannot cross
        // any bucket edge: outputs must be identical.
        let x = quantize_adversarial_input(&calib.images[0], &qm);
        let eps = (qm.input_params.scale * 0.4) as f32;
        let x2 = x.map(|v| (v + eps).min(1.0));
        assert_eq!(
            quantize_tensor(&x, &qm.input_params),
            quantize_tensor(&x2, &qm.input_params)
        );
        let (la, _) = integer_infer(&qm, &x).unwrap();
        let (lb, _) = integer_infer(&qm, &x2).unwrap();
        assert_eq!(la.data(), lb.data());
    }

    #[test]
    fn quantize_twice_is_identical() {
        let model = build_toy_resnet_seeded(&[16, 16, 3], 10, 3).unwrap();
        let calib = synthetic_shapes(8, 10, 16, 3, 0.05, 7, Split::Calibration).unwrap();
        let a = quantize_model(&model, &calib, 8).unwrap();
        let b = quantize_model(&model, &calib, 8).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn dequantized_weights_within_half_scale() {
        let model = build_toy_resnet_seeded(&[16, 16, 3], 10, 3).unwrap();
        let calib = synthetic_shapes(8, 10, 16, 3, 0.05, 7, Split::Calibration).unwrap();
        let qm = quantize_model(&model, &calib, 8).unwrap();
        let deq = dequantize_model(&qm).unwrap();
        for (idx, (orig, got)) in model.nodes().iter().zip(deq.nodes()).enumerate() {
            if orig.params.is_empty() {
                continue;
            }
            let wp = qm.nodes[idx].weight_params.unwrap();
            for (a, b) in orig.params[0].data().iter().zip(got.params[0].data()) {
                assert!((a - b).abs() as f64 <= wp.scale / 2.0 + 1e-9);
            }
        }
    }

    #[test]
    fn adversarial_input_snapping() {
        let model = build_toy_resnet_seeded(&[16, 16, 3], 10, 3).unwrap();
        let calib = synthetic_shapes(8, 10, 16, 3, 0.05, 7, Split::Calibration).unwrap();
        let qm = quantize_model(&model, &calib, 8).unwrap();
        // The model perceives the lattice-snapped clean sample; perturbations
        // are judged relative to that.
        let clean = quantize_adversarial_input(&calib.images[0], &qm);
        let scale = qm.input_params.scale as f32;

        // Sub-half-LSB perturbation is erased entirely.
        let tiny = clean.map(|v| (v + 0.3 * scale).min(1.0));
        let snapped = quantize_adversarial_input(&tiny, &qm);
        assert_eq!(snapped.data(), clean.data());

        // One-LSB perturbation survives exactly (away from the clip border).
        let one = clean.map(|v| if v + scale <= 1.0 { v + scale } else { v });
        let snapped_one = quantize_adversarial_input(&one, &qm);
        for ((&a, &c), &base) in snapped_one.data().iter().zip(clean.data()).zip(clean.data()) {
            if base + scale <= 1.0 {
                assert!((a - c - scale).abs() < 1e-5, "{a} vs {c}");
            }
        }

        // L-inf between snapped and raw adversarial input <= scale/2.
        let linf = snapped
            .data()
            .iter()
            .zip(tiny.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(linf <= scale / 2.0 + 1e-6);
    }
}
