//! Wengert-style tape: records executed primitives during a forward pass and
//! replays vector-Jacobian products in strict reverse execution order.
//!
//! Recording is opt-in: a plain `forward_primitive` call touches no tape. One
//! tape belongs to one forward pass; concurrent passes each own their tape.

use std::collections::BTreeMap;

use super::ops::{self, OpKind};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value produced on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

/// Which parameter tensor of a layer a leaf refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamSlot {
    Weight,
    Bias,
}

/// Identity of a leaf value (differentiation target).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafId {
    /// The network input.
    Input,
    /// A model parameter, addressed by graph node and slot.
    Param { node: usize, slot: ParamSlot },
}

enum Saved {
    None,
    /// Flat input index chosen per pooled output element.
    Argmax(Vec<usize>),
    /// Softmax probabilities saved by the fused cross-entropy.
    Probs(Tensor),
}

enum Record {
    Leaf(LeafId),
    Op {
        kind: OpKind,
        inputs: Vec<usize>,
        saved: Saved,
    },
}

/// Ordered record of executed primitives with the values they produced.
#[derive(Default)]
pub struct Tape {
    records: Vec<Record>,
    values: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// Register a leaf (input or parameter) value.
    pub fn leaf(&mut self, value: Tensor, id: LeafId) -> ValueId {
        self.records.push(Record::Leaf(id));
        self.values.push(value);
        ValueId(self.values.len() - 1)
    }

    /// Execute `kind` on already-recorded values and record the result.
    pub fn apply(&mut self, kind: OpKind, inputs: &[ValueId]) -> Result<ValueId> {
        for id in inputs {
            if id.0 >= self.values.len() {
                return Err(Error::invalid_argument("tape input id out of range"));
            }
        }
        let tensors: Vec<&Tensor> = inputs.iter().map(|id| &self.values[id.0]).collect();
        let (out, saved) = match kind {
            OpKind::MaxPool(p) => {
                let (t, argmax) = ops::max_pool(tensors[0], p)?;
                (t, Saved::Argmax(argmax))
            }
            OpKind::CrossEntropyLoss { target } => {
                let (loss, probs) = ops::cross_entropy_loss(tensors[0], target)?;
                (loss, Saved::Probs(probs))
            }
            _ => (ops::forward_primitive(kind, &tensors)?, Saved::None),
        };
        self.records.push(Record::Op {
            kind,
            inputs: inputs.iter().map(|id| id.0).collect(),
            saved,
        });
        self.values.push(out);
        Ok(ValueId(self.values.len() - 1))
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.values[id.0]
    }
}

/// Gradients of one scalar (or seeded VJP) with respect to the tape's leaves.
#[derive(Debug)]
pub struct Gradients {
    /// Gradient w.r.t. the `Input` leaf, when one was recorded and reached.
    pub input: Option<Tensor>,
    /// Gradients w.r.t. parameter leaves, keyed by (node, slot).
    pub params: BTreeMap<(usize, ParamSlot), Tensor>,
}

/// Reverse pass from a scalar loss; the loss' own adjoint is 1.
pub fn backward(tape: &Tape, loss: ValueId) -> Result<Gradients> {
    if loss.0 >= tape.values.len() {
        return Err(Error::invalid_argument("loss value not on tape"));
    }
    if tape.values[loss.0].numel() != 1 {
        return Err(Error::invalid_argument(
            "backward expects a scalar loss; use backward_vjp for vectors",
        ));
    }
    backward_vjp(tape, loss, &Tensor::scalar(1.0))
}

/// Reverse pass seeding the adjoint of `value` with `seed` (same shape).
pub fn backward_vjp(tape: &Tape, value: ValueId, seed: &Tensor) -> Result<Gradients> {
    if value.0 >= tape.values.len() {
        return Err(Error::invalid_argument("value not on tape"));
    }
    if seed.shape() != tape.values[value.0].shape() {
        return Err(Error::shape_mismatch(format!(
            "seed {:?} vs value {:?}",
            seed.shape(),
            tape.values[value.0].shape()
        )));
    }
    let mut adjoints: Vec<Option<Tensor>> = vec![None; tape.values.len()];
    adjoints[value.0] = Some(seed.clone());

    // Strict reverse execution order.
    for idx in (0..=value.0).rev() {
        let Some(dy) = adjoints[idx].take() else {
            continue;
        };
        match &tape.records[idx] {
            Record::Leaf(_) => {
                adjoints[idx] = Some(dy); // keep for collection below
            }
            Record::Op { kind, inputs, saved } => {
                let in_tensors: Vec<&Tensor> =
                    inputs.iter().map(|&i| &tape.values[i]).collect();
                let grads = vjp(*kind, &in_tensors, &dy, saved)?;
                debug_assert_eq!(grads.len(), inputs.len());
                for (&input_idx, g) in inputs.iter().zip(grads) {
                    accumulate(&mut adjoints[input_idx], g);
                }
            }
        }
    }

    let mut out = Gradients { input: None, params: BTreeMap::new() };
    for (idx, record) in tape.records.iter().enumerate() {
        if let Record::Leaf(leaf) = record {
            if let Some(g) = adjoints[idx].take() {
                match *leaf {
                    LeafId::Input => out.input = Some(g),
                    LeafId::Param { node, slot } => {
                        out.params.insert((node, slot), g);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

/// Vector-Jacobian product of one primitive: adjoints of each input given the
/// adjoint `dy` of the output.
fn vjp(kind: OpKind, inputs: &[&Tensor], dy: &Tensor, saved: &Saved) -> Result<Vec<Tensor>> {
    match kind {
        OpKind::Dense => {
            let (x, w) = (inputs[0], inputs[1]);
            let n_in = x.numel();
            let n_out = dy.numel();
            let mut dx = vec![0.0f32; n_in];
            let mut dw = vec![0.0f32; n_in * n_out];
            for i in 0..n_in {
                let mut acc = 0.0f32;
                for o in 0..n_out {
                    acc += dy.data()[o] * w.data()[i * n_out + o];
                    dw[i * n_out + o] = x.data()[i] * dy.data()[o];
                }
                dx[i] = acc;
            }
            Ok(vec![
                Tensor::from_parts(x.shape().to_vec(), dx),
                Tensor::from_parts(w.shape().to_vec(), dw),
                dy.clone(),
            ])
        }
        OpKind::Conv2d { stride, pad } => conv2d_vjp(inputs, dy, stride, pad),
        OpKind::DepthwiseConv2d { stride, pad } => depthwise_vjp(inputs, dy, stride, pad),
        OpKind::Relu => {
            // Subgradient at 0 is 0.
            Ok(vec![inputs[0].zip_map(dy, |x, g| if x > 0.0 { g } else { 0.0 })?])
        }
        OpKind::MaxPool(_) => {
            let Saved::Argmax(argmax) = saved else {
                unreachable!("max_pool records argmax");
            };
            let mut dx = vec![0.0f32; inputs[0].numel()];
            for (o, &src) in argmax.iter().enumerate() {
                dx[src] += dy.data()[o];
            }
            Ok(vec![Tensor::from_parts(inputs[0].shape().to_vec(), dx)])
        }
        OpKind::AvgPool(p) => {
            let x = inputs[0];
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (oh, ow) = (dy.shape()[0], dy.shape()[1]);
            let inv = 1.0 / (p.size * p.size) as f32;
            let mut dx = vec![0.0f32; x.numel()];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let g = dy.data()[(oy * ow + ox) * c + ch] * inv;
                        for ky in 0..p.size {
                            for kx in 0..p.size {
                                let iy = oy * p.stride + ky;
                                let ix = ox * p.stride + kx;
                                debug_assert!(iy < h && ix < w);
                                dx[(iy * w + ix) * c + ch] += g;
                            }
                        }
                    }
                }
            }
            Ok(vec![Tensor::from_parts(x.shape().to_vec(), dx)])
        }
        OpKind::Softmax => {
            let p = ops::softmax(inputs[0]);
            let row = *p.shape().last().unwrap();
            let mut dx = vec![0.0f32; p.numel()];
            for r in 0..p.numel() / row {
                let ps = &p.data()[r * row..(r + 1) * row];
                let gs = &dy.data()[r * row..(r + 1) * row];
                let dot: f32 = ps.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                for i in 0..row {
                    dx[r * row + i] = ps[i] * (gs[i] - dot);
                }
            }
            Ok(vec![Tensor::from_parts(p.shape().to_vec(), dx)])
        }
        OpKind::Add => Ok(vec![dy.clone(), dy.clone()]),
        OpKind::Flatten => Ok(vec![dy.reshaped(inputs[0].shape().to_vec())?]),
        OpKind::CrossEntropyLoss { target } => {
            let Saved::Probs(probs) = saved else {
                unreachable!("cross_entropy records probs");
            };
            let scale = dy.item();
            let mut dx = probs.data().to_vec();
            dx[target] -= 1.0;
            for v in &mut dx {
                *v *= scale;
            }
            Ok(vec![Tensor::from_parts(probs.shape().to_vec(), dx)])
        }
    }
}

fn conv2d_vjp(inputs: &[&Tensor], dy: &Tensor, stride: usize, pad: usize) -> Result<Vec<Tensor>> {
    let (x, kernel) = (inputs[0], inputs[1]);
    let (h, w, c_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, c_out) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
    let (oh, ow) = (dy.shape()[0], dy.shape()[1]);
    let mut dx = vec![0.0f32; x.numel()];
    let mut dk = vec![0.0f32; kernel.numel()];
    let mut db = vec![0.0f32; c_out];
    for oy in 0..oh {
        for ox in 0..ow {
            for oc in 0..c_out {
                let g = dy.data()[(oy * ow + ox) * c_out + oc];
                if g == 0.0 {
                    continue;
                }
                db[oc] += g;
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
                            dx[x_base + ic] += g * kernel.data()[k_base + ic * c_out + oc];
                            dk[k_base + ic * c_out + oc] += g * x.data()[x_base + ic];
                        }
                    }
                }
            }
        }
    }
    Ok(vec![
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
        Tensor::from_parts(vec![c_out], db),
    ])
}

fn depthwise_vjp(inputs: &[&Tensor], dy: &Tensor, stride: usize, pad: usize) -> Result<Vec<Tensor>> {
    let (x, kernel) = (inputs[0], inputs[1]);
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let (oh, ow) = (dy.shape()[0], dy.shape()[1]);
    let mut dx = vec![0.0f32; x.numel()];
    let mut dk = vec![0.0f32; kernel.numel()];
    let mut db = vec![0.0f32; c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let g = dy.data()[(oy * ow + ox) * c + ch];
                if g == 0.0 {
                    continue;
                }
                db[ch] += g;
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
                        let xi = (iy as usize * w + ix as usize) * c + ch;
                        let ki = (ky * kw + kx) * c + ch;
                        dx[xi] += g * kernel.data()[ki];
                        dk[ki] += g * x.data()[xi];
                    }
                }
            }
        }
    }
    Ok(vec![
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
        Tensor::from_parts(vec![c], db),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_tape_is_empty() {
        assert!(Tape::new().is_empty());
    }

    #[test]
    fn fan_out_adjoints_accumulate() {
        // f(x) = x + x: both uses of x must contribute, df/dx = 2.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0), LeafId::Input);
        let y = tape.apply(OpKind::Add, &[x, x]).unwrap();
        let g = backward(&tape, y).unwrap();
        assert_eq!(g.input.unwrap().item(), 2.0);
    }

    #[test]
    fn relu_dead_at_negative_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0), LeafId::Input);
        let y = tape.apply(OpKind::Relu, &[x]).unwrap();
        let g = backward(&tape, y).unwrap();
        assert_eq!(g.input.unwrap().item(), 0.0);
    }

    #[test]
    fn loss_gradient_wrt_itself_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), LeafId::Input);
        let g = backward_vjp(&tape, x, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.input.unwrap().item(), 1.0);
    }

    #[test]
    fn backward_rejects_missing_loss() {
        let tape = Tape::new();
        assert!(backward(&tape, ValueId(3)).is_err());
    }

    #[test]
    fn backward_rejects_vector_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[2], 1.0), LeafId::Input);
        assert!(backward(&tape, x).is_err());
    }
}
