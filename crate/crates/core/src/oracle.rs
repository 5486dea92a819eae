//! Attacker knowledge tiers: gradient (white-box), score (gray-box), and
//! decision (black-box) oracles with query accounting.
//!
//! Only float models can back a [`GradientOracle`]; integer models expose
//! score/decision views, so white-box attacks cannot be aimed at them by
//! construction.

use std::cell::Cell;

use crate::error::Result;
use crate::model::{Classify, ModelGraph};
use crate::quant::{integer_infer, QuantizedModel};
use crate::tensor::{backward, backward_vjp, OpKind, Tensor};

/// White-box access: logits, loss, and exact input gradients.
pub trait GradientOracle {
    fn num_classes(&self) -> usize;
    fn input_shape(&self) -> &[usize];
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
    fn probabilities(&self, x: &Tensor) -> Result<Tensor>;
    /// Cross-entropy loss of `x` against label `y`.
    fn loss(&self, x: &Tensor, y: usize) -> Result<f32>;
    /// Gradient of the cross-entropy loss with respect to `x`.
    fn grad_loss(&self, x: &Tensor, y: usize) -> Result<Tensor>;
    /// Gradient of `sum_k weights[k] * Z_k(x)` with respect to `x` — one
    /// backward pass computes any linear combination of logit gradients.
    fn grad_logits(&self, x: &Tensor, weights: &[f32]) -> Result<Tensor>;
    /// How many backward passes this oracle has served.
    fn gradient_queries(&self) -> u64;
}

/// Gray-box access: class probability vector, query-counted.
pub trait ScoreOracle {
    fn num_classes(&self) -> usize;
    fn input_shape(&self) -> &[usize];
    fn probabilities(&self, x: &Tensor) -> Result<Tensor>;
    fn queries(&self) -> u64;

    fn decide(&self, x: &Tensor) -> Result<usize> {
        Ok(self.probabilities(x)?.argmax())
    }
}

/// Black-box access: final decision only, query-counted.
pub trait DecisionOracle {
    fn num_classes(&self) -> usize;
    fn input_shape(&self) -> &[usize];
    fn decide(&self, x: &Tensor) -> Result<usize>;
    fn queries(&self) -> u64;
}

/// All three tiers over a float model.
pub struct FloatOracle<'m> {
    model: &'m ModelGraph,
    forward_queries: Cell<u64>,
    gradient_queries: Cell<u64>,
}

impl<'m> FloatOracle<'m> {
    pub fn new(model: &'m ModelGraph) -> Self {
        FloatOracle {
            model,
            forward_queries: Cell::new(0),
            gradient_queries: Cell::new(0),
        }
    }

    pub fn model(&self) -> &ModelGraph {
        self.model
    }
}

impl GradientOracle for FloatOracle<'_> {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn input_shape(&self) -> &[usize] {
        self.model.input_shape()
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_queries.set(self.forward_queries.get() + 1);
        self.model.forward(x)
    }

    fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_queries.set(self.forward_queries.get() + 1);
        self.model.probabilities(x)
    }

    fn loss(&self, x: &Tensor, y: usize) -> Result<f32> {
        self.forward_queries.set(self.forward_queries.get() + 1);
        let (mut tape, _, logits) = self.model.forward_recorded(x)?;
        let loss = tape.apply(OpKind::CrossEntropyLoss { target: y }, &[logits])?;
        Ok(tape.value(loss).item())
    }

    fn grad_loss(&self, x: &Tensor, y: usize) -> Result<Tensor> {
        self.gradient_queries.set(self.gradient_queries.get() + 1);
        let (mut tape, _, logits) = self.model.forward_recorded(x)?;
        let loss = tape.apply(OpKind::CrossEntropyLoss { target: y }, &[logits])?;
        let grads = backward(&tape, loss)?;
        grads.input.ok_or_else(|| {
            crate::error::Error::GradientDegenerate("input unreachable from loss".into())
        })
    }

    fn grad_logits(&self, x: &Tensor, weights: &[f32]) -> Result<Tensor> {
        self.gradient_queries.set(self.gradient_queries.get() + 1);
        let (tape, _, logits) = self.model.forward_recorded(x)?;
        let seed = Tensor::new(vec![weights.len()], weights.to_vec())?;
        let grads = backward_vjp(&tape, logits, &seed)?;
        grads.input.ok_or_else(|| {
            crate::error::Error::GradientDegenerate("input unreachable from logits".into())
        })
    }

    fn gradient_queries(&self) -> u64 {
        self.gradient_queries.get()
    }
}

impl ScoreOracle for FloatOracle<'_> {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn input_shape(&self) -> &[usize] {
        self.model.input_shape()
    }

    fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_queries.set(self.forward_queries.get() + 1);
        self.model.probabilities(x)
    }

    fn queries(&self) -> u64 {
        self.forward_queries.get()
    }
}

impl DecisionOracle for FloatOracle<'_> {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn input_shape(&self) -> &[usize] {
        self.model.input_shape()
    }

    fn decide(&self, x: &Tensor) -> Result<usize> {
        self.forward_queries.set(self.forward_queries.get() + 1);
        Ok(self.model.forward(x)?.argmax())
    }

    fn queries(&self) -> u64 {
        self.forward_queries.get()
    }
}

impl Classify for FloatOracle<'_> {
    fn classify(&self, x: &Tensor) -> usize {
        self.model.classify(x)
    }
}

/// Score/decision views over a quantized model (integer kernels inside).
pub struct QuantOracle<'q> {
    qm: &'q QuantizedModel,
    queries: Cell<u64>,
}

impl<'q> QuantOracle<'q> {
    pub fn new(qm: &'q QuantizedModel) -> Self {
        QuantOracle { qm, queries: Cell::new(0) }
    }

    pub fn model(&self) -> &QuantizedModel {
        self.qm
    }
}

impl ScoreOracle for QuantOracle<'_> {
    fn num_classes(&self) -> usize {
        self.qm.num_classes()
    }

    fn input_shape(&self) -> &[usize] {
        self.qm.input_shape()
    }

    fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        self.queries.set(self.queries.get() + 1);
        Ok(integer_infer(self.qm, x)?.1)
    }

    fn queries(&self) -> u64 {
        self.queries.get()
    }
}

impl DecisionOracle for QuantOracle<'_> {
    fn num_classes(&self) -> usize {
        self.qm.num_classes()
    }

    fn input_shape(&self) -> &[usize] {
        self.qm.input_shape()
    }

    fn decide(&self, x: &Tensor) -> Result<usize> {
        self.queries.set(self.queries.get() + 1);
        Ok(integer_infer(self.qm, x)?.0.argmax())
    }

    fn queries(&self) -> u64 {
        self.queries.get()
    }
}

impl Classify for QuantOracle<'_> {
    fn classify(&self, x: &Tensor) -> usize {
        self.qm.classify(x)
    }
}

/// Wraps any oracle behind an input transform (pre-processing defenses).
pub struct PreprocessedOracle<O, F> {
    inner: O,
    transform: F,
}

impl<O, F: Fn(&Tensor) -> Tensor> PreprocessedOracle<O, F> {
    pub fn new(inner: O, transform: F) -> Self {
        PreprocessedOracle { inner, transform }
    }
}

impl<O: ScoreOracle, F: Fn(&Tensor) -> Tensor> ScoreOracle for PreprocessedOracle<O, F> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn input_shape(&self) -> &[usize] {
        self.inner.input_shape()
    }

    fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        self.inner.probabilities(&(self.transform)(x))
    }

    fn queries(&self) -> u64 {
        self.inner.queries()
    }
}

impl<O: ScoreOracle, F: Fn(&Tensor) -> Tensor> Classify for PreprocessedOracle<O, F> {
    fn classify(&self, x: &Tensor) -> usize {
        self.inner
            .probabilities(&(self.transform)(x))
            .map(|p| p.argmax())
            .unwrap_or(0)
    }
}

/// Linear softmax classifier with closed-form gradients: `Z_k = w_k . x + b_k`.
///
/// Serves as an analytic oracle in tests (DeepFool distances, normal
/// estimation, FGSM direction) where every quantity has a hand-derivable
/// value.
pub struct LinearOracle {
    /// One weight vector per class.
    pub weights: Vec<Vec<f32>>,
    pub bias: Vec<f32>,
    shape: Vec<usize>,
    queries: Cell<u64>,
    gradient_queries: Cell<u64>,
}

impl LinearOracle {
    pub fn new(weights: Vec<Vec<f32>>, bias: Vec<f32>) -> Self {
        assert_eq!(weights.len(), bias.len());
        let dim = weights[0].len();
        LinearOracle {
            weights,
            bias,
            shape: vec![dim],
            queries: Cell::new(0),
            gradient_queries: Cell::new(0),
        }
    }

    /// Same classifier viewed over image-shaped inputs (flattened row-major).
    pub fn with_shape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.weights[0].len());
        self.shape = shape;
        self
    }

    fn raw_logits(&self, x: &Tensor) -> Tensor {
        let z: Vec<f32> = self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x.data()).map(|(&wi, &xi)| wi * xi).sum::<f32>())
            .collect();
        Tensor::new(vec![z.len()], z).unwrap()
    }
}

impl GradientOracle for LinearOracle {
    fn num_classes(&self) -> usize {
        self.weights.len()
    }

    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.queries.set(self.queries.get() + 1);
        Ok(self.raw_logits(x))
    }

    fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        self.queries.set(self.queries.get() + 1);
        Ok(crate::tensor::forward_primitive(OpKind::Softmax, &[&self.raw_logits(x)])?)
    }

    fn loss(&self, x: &Tensor, y: usize) -> Result<f32> {
        let p = GradientOracle::probabilities(self, x)?;
        Ok(-(p.data()[y].max(1e-30)).ln())
    }

    fn grad_loss(&self, x: &Tensor, y: usize) -> Result<Tensor> {
        self.gradient_queries.set(self.gradient_queries.get() + 1);
        let p = crate::tensor::forward_primitive(OpKind::Softmax, &[&self.raw_logits(x)])?;
        let mut g = vec![0.0f32; x.numel()];
        for (k, w) in self.weights.iter().enumerate() {
            let coeff = p.data()[k] - if k == y { 1.0 } else { 0.0 };
            for (gi, &wi) in g.iter_mut().zip(w) {
                *gi += coeff * wi;
            }
        }
        Tensor::new(x.shape().to_vec(), g)
    }

    fn grad_logits(&self, x: &Tensor, weights: &[f32]) -> Result<Tensor> {
        self.gradient_queries.set(self.gradient_queries.get() + 1);
        let mut g = vec![0.0f32; x.numel()];
        for (k, w) in self.weights.iter().enumerate() {
            for (gi, &wi) in g.iter_mut().zip(w) {
                *gi += weights[k] * wi;
            }
        }
        Tensor::new(x.shape().to_vec(), g)
    }

    fn gradient_queries(&self) -> u64 {
        self.gradient_queries.get()
    }
}

impl ScoreOracle for LinearOracle {
    fn num_classes(&self) -> usize {
        self.weights.len()
    }

    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        GradientOracle::probabilities(self, x)
    }

    fn queries(&self) -> u64 {
        self.queries.get()
    }
}

impl DecisionOracle for LinearOracle {
    fn num_classes(&self) -> usize {
        self.weights.len()
    }

    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn decide(&self, x: &Tensor) -> Result<usize> {
        self.queries.set(self.queries.get() + 1);
        Ok(self.raw_logits(x).argmax())
    }

    fn queries(&self) -> u64 {
        self.queries.get()
    }
}

impl Classify for LinearOracle {
    fn classify(&self, x: &Tensor) -> usize {
        self.raw_logits(x).argmax()
    }
}
