//! Toy-scale feed-forward classifiers: graph construction, builders,
//! training, evaluation, and the model file container.

mod builders;
pub mod dataset;
pub(crate) mod serialize;
pub(crate) mod train;

pub use builders::{build_toy_dscnn, build_toy_dscnn_seeded, build_toy_resnet, build_toy_resnet_seeded};
pub use dataset::{Dataset, Split};
pub use serialize::{load_model, save_model};
pub use train::{train, OptimizerKind, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{backward, Gradients, LeafId, OpKind, ParamSlot, PoolParams, Tape, Tensor, ValueId};

/// Layer vocabulary of the model graphs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d { out_channels: usize, kernel: usize, stride: usize, pad: usize },
    DepthwiseConv2d { kernel: usize, stride: usize, pad: usize },
    Dense { units: usize },
    Relu,
    MaxPool { size: usize, stride: usize },
    AvgPool { size: usize, stride: usize },
    Flatten,
    /// Residual addition of two earlier node outputs.
    Add,
}

/// Where a node reads its operand from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeInput {
    NetworkInput,
    Node(usize),
}

/// One layer instance: spec, operand references, parameter tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphNode {
    pub layer: LayerSpec,
    pub inputs: Vec<NodeInput>,
    /// `[weights, bias]` for parameterized layers, empty otherwise.
    pub params: Vec<Tensor>,
}

/// Defense provenance carried by hardened models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseProvenance {
    pub kind: String,
    pub config_hash: u64,
}

/// Layered feed-forward classifier. Nodes are stored in topological order;
/// the last node's output is the logit vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    num_classes: usize,
    nodes: Vec<GraphNode>,
    pub provenance: Option<DefenseProvenance>,
}

impl ModelGraph {
    /// Validates that layer shapes chain from the input shape to the class
    /// count before accepting the graph.
    pub fn new(input_shape: Vec<usize>, num_classes: usize, nodes: Vec<GraphNode>) -> Result<Self> {
        let model = ModelGraph { input_shape, num_classes, nodes, provenance: None };
        let shapes = model.infer_shapes()?;
        let out = shapes.last().ok_or_else(|| Error::invalid_argument("empty graph"))?;
        if out.as_slice() != [model.num_classes] {
            return Err(Error::shape_mismatch(format!(
                "graph output {out:?} does not match {} classes",
                model.num_classes
            )));
        }
        Ok(model)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub(crate) fn nodes_mut(&mut self) -> &mut [GraphNode] {
        &mut self.nodes
    }

    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| n.params.iter())
            .map(Tensor::numel)
            .sum()
    }

    /// Output shape of every node, in order.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let probe = Tensor::zeros(&self.input_shape);
        let outputs = self.eval_nodes(&probe)?;
        Ok(outputs.iter().map(|t| t.shape().to_vec()).collect())
    }

    fn op_kind(&self, layer: LayerSpec) -> OpKind {
        match layer {
            LayerSpec::Conv2d { stride, pad, .. } => OpKind::Conv2d { stride, pad },
            LayerSpec::DepthwiseConv2d { stride, pad, .. } => OpKind::DepthwiseConv2d { stride, pad },
            LayerSpec::Dense { .. } => OpKind::Dense,
            LayerSpec::Relu => OpKind::Relu,
            LayerSpec::MaxPool { size, stride } => OpKind::MaxPool(PoolParams { size, stride }),
            LayerSpec::AvgPool { size, stride } => OpKind::AvgPool(PoolParams { size, stride }),
            LayerSpec::Flatten => OpKind::Flatten,
            LayerSpec::Add => OpKind::Add,
        }
    }

    /// Unrecorded forward pass over all nodes; returns every node output.
    pub(crate) fn eval_nodes(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::shape_mismatch(format!(
                "input {:?} vs model input {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let mut operands: Vec<&Tensor> = Vec::with_capacity(node.inputs.len() + node.params.len());
            for input in &node.inputs {
                operands.push(match input {
                    NodeInput::NetworkInput => x,
                    NodeInput::Node(i) => &outputs[*i],
                });
            }
            for p in &node.params {
                operands.push(p);
            }
            outputs.push(crate::tensor::forward_primitive(self.op_kind(node.layer), &operands)?);
        }
        Ok(outputs)
    }

    /// Logits for one input (no recording).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.eval_nodes(x)?.pop().unwrap())
    }

    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        Ok(crate::tensor::forward_primitive(OpKind::Softmax, &[&self.forward(x)?])?)
    }

    /// Forward pass recorded on a fresh tape. Returns the tape, the value id
    /// of every node output, and the logits id.
    pub fn forward_recorded(&self, x: &Tensor) -> Result<(Tape, Vec<ValueId>, ValueId)> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::shape_mismatch(format!(
                "input {:?} vs model input {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        let mut tape = Tape::new();
        let x_id = tape.leaf(x.clone(), LeafId::Input);
        let mut node_ids: Vec<ValueId> = Vec::with_capacity(self.nodes.len());
        for (node_idx, node) in self.nodes.iter().enumerate() {
            let mut operand_ids: Vec<ValueId> = Vec::with_capacity(node.inputs.len() + node.params.len());
            for input in &node.inputs {
                operand_ids.push(match input {
                    NodeInput::NetworkInput => x_id,
                    NodeInput::Node(i) => node_ids[*i],
                });
            }
            for (slot_idx, p) in node.params.iter().enumerate() {
                let slot = if slot_idx == 0 { ParamSlot::Weight } else { ParamSlot::Bias };
                operand_ids.push(tape.leaf(p.clone(), LeafId::Param { node: node_idx, slot }));
            }
            node_ids.push(tape.apply(self.op_kind(node.layer), &operand_ids)?);
        }
        let logits = *node_ids.last().unwrap();
        Ok((tape, node_ids, logits))
    }

    /// Cross-entropy loss and gradients for one labeled sample.
    pub fn loss_and_gradients(&self, x: &Tensor, label: usize) -> Result<(f32, Gradients)> {
        let (mut tape, _, logits) = self.forward_recorded(x)?;
        let loss = tape.apply(OpKind::CrossEntropyLoss { target: label }, &[logits])?;
        let loss_value = tape.value(loss).item();
        let grads = backward(&tape, loss)?;
        Ok((loss_value, grads))
    }

    /// Index of the node whose output feeds the final dense layer — the
    /// "penultimate representation" used by feature-space defenses.
    pub fn penultimate_node(&self) -> Option<usize> {
        let last = self.nodes.last()?;
        if !matches!(last.layer, LayerSpec::Dense { .. }) {
            return None;
        }
        match last.inputs.first()? {
            NodeInput::Node(i) => Some(*i),
            NodeInput::NetworkInput => None,
        }
    }

    /// Same architecture with freshly initialized parameters.
    pub fn reinitialized(&self, seed: u64) -> ModelGraph {
        let mut clone = self.clone();
        builders::reinit_params(&mut clone, seed);
        clone.provenance = None;
        clone
    }
}

/// Anything that maps an image to a class index.
pub trait Classify {
    fn classify(&self, x: &Tensor) -> usize;
}

impl Classify for ModelGraph {
    fn classify(&self, x: &Tensor) -> usize {
        self.forward(x).map(|l| l.argmax()).unwrap_or(0)
    }
}

impl<F: Fn(&Tensor) -> usize> Classify for F {
    fn classify(&self, x: &Tensor) -> usize {
        self(x)
    }
}

/// Fraction of top-1 correct predictions, exactly `#correct / N`.
pub fn evaluate_accuracy<C: Classify + Sync>(classifier: &C, data: &Dataset) -> Result<f32> {
    if data.images.is_empty() {
        return Err(Error::invalid_argument("dataset is empty"));
    }
    let correct: Vec<bool> = crate::par::map_indexed(data.images.len(), |i| {
        classifier.classify(&data.images[i]) == data.labels[i]
    });
    Ok(correct.iter().filter(|&&c| c).count() as f32 / data.images.len() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_oracle_accuracy() {
        let images = vec![Tensor::zeros(&[2, 2, 1]); 4];
        let zeros = Dataset::new(images.clone(), vec![0; 4], 2, Split::Test).unwrap();
        let ones = Dataset::new(images.clone(), vec![1; 4], 2, Split::Test).unwrap();
        let always_zero = |_: &Tensor| 0usize;
        assert_eq!(evaluate_accuracy(&always_zero, &zeros).unwrap(), 1.0);
        assert_eq!(evaluate_accuracy(&always_zero, &ones).unwrap(), 0.0);
    }

    #[test]
    fn counting_accuracy() {
        let images = vec![Tensor::zeros(&[1]); 4];
        let data = Dataset::new(images, vec![0, 0, 0, 1], 2, Split::Test).unwrap();
        // Classifier that always answers 0: 3 of 4 correct.
        assert_eq!(evaluate_accuracy(&|_: &Tensor| 0usize, &data).unwrap(), 0.75);
    }

    #[test]
    fn empty_dataset_rejected() {
        let data = Dataset { images: vec![], labels: vec![], classes: 2, split: Split::Test };
        assert!(evaluate_accuracy(&|_: &Tensor| 0usize, &data).is_err());
    }
}
