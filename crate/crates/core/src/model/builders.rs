//! Constructors for the two toy architectures and parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GraphNode, LayerSpec, ModelGraph, NodeInput};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DEFAULT_BUILD_SEED: u64 = 0x7001;

/// Kaiming-style uniform fan-in initialization.
fn init_weight(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let limit = (6.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("init shape")
}

struct GraphBuilder {
    input_shape: Vec<usize>,
    nodes: Vec<GraphNode>,
    /// Running output shape of the chain tip.
    shape: Vec<usize>,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    fn new(input_shape: &[usize], seed: u64) -> Self {
        GraphBuilder {
            input_shape: input_shape.to_vec(),
            nodes: Vec::new(),
            shape: input_shape.to_vec(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn tip(&self) -> NodeInput {
        if self.nodes.is_empty() {
            NodeInput::NetworkInput
        } else {
            NodeInput::Node(self.nodes.len() - 1)
        }
    }

    fn last_index(&self) -> usize {
        self.nodes.len() - 1
    }

    fn push(&mut self, layer: LayerSpec, inputs: Vec<NodeInput>, params: Vec<Tensor>) {
        self.nodes.push(GraphNode { layer, inputs, params });
    }

    fn conv(&mut self, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> &mut Self {
        let c_in = self.shape[2];
        let w = init_weight(
            &mut self.rng,
            vec![kernel, kernel, c_in, out_channels],
            kernel * kernel * c_in,
        );
        let b = Tensor::zeros(&[out_channels]);
        let tip = self.tip();
        self.push(LayerSpec::Conv2d { out_channels, kernel, stride, pad }, vec![tip], vec![w, b]);
        self.shape = vec![
            (self.shape[0] + 2 * pad - kernel) / stride + 1,
            (self.shape[1] + 2 * pad - kernel) / stride + 1,
            out_channels,
        ];
        self
    }

    fn depthwise(&mut self, kernel: usize, stride: usize, pad: usize) -> &mut Self {
        let c = self.shape[2];
        let w = init_weight(&mut self.rng, vec![kernel, kernel, c], kernel * kernel);
        let b = Tensor::zeros(&[c]);
        let tip = self.tip();
        self.push(LayerSpec::DepthwiseConv2d { kernel, stride, pad }, vec![tip], vec![w, b]);
        self.shape = vec![
            (self.shape[0] + 2 * pad - kernel) / stride + 1,
            (self.shape[1] + 2 * pad - kernel) / stride + 1,
            c,
        ];
        self
    }

    fn relu(&mut self) -> &mut Self {
        let tip = self.tip();
        self.push(LayerSpec::Relu, vec![tip], vec![]);
        self
    }

    fn max_pool(&mut self, size: usize) -> &mut Self {
        let tip = self.tip();
        self.push(LayerSpec::MaxPool { size, stride: size }, vec![tip], vec![]);
        self.shape = vec![self.shape[0] / size, self.shape[1] / size, self.shape[2]];
        self
    }

    fn avg_pool(&mut self, size: usize) -> &mut Self {
        let tip = self.tip();
        self.push(LayerSpec::AvgPool { size, stride: size }, vec![tip], vec![]);
        self.shape = vec![self.shape[0] / size, self.shape[1] / size, self.shape[2]];
        self
    }

    fn add(&mut self, a: usize, b: usize) -> &mut Self {
        self.push(LayerSpec::Add, vec![NodeInput::Node(a), NodeInput::Node(b)], vec![]);
        self
    }

    fn flatten(&mut self) -> &mut Self {
        let tip = self.tip();
        self.push(LayerSpec::Flatten, vec![tip], vec![]);
        self.shape = vec![self.shape.iter().product()];
        self
    }

    fn dense(&mut self, units: usize) -> &mut Self {
        let n_in: usize = self.shape.iter().product();
        let w = init_weight(&mut self.rng, vec![n_in, units], n_in);
        let b = Tensor::zeros(&[units]);
        let tip = self.tip();
        self.push(LayerSpec::Dense { units }, vec![tip], vec![w, b]);
        self.shape = vec![units];
        self
    }

    fn finish(self, num_classes: usize) -> Result<ModelGraph> {
        ModelGraph::new(self.input_shape, num_classes, self.nodes)
    }
}

fn check_image_input(input_shape: &[usize]) -> Result<()> {
    match input_shape {
        [h, w, c] if h == w && (*c == 1 || *c == 3) && *h >= 8 => Ok(()),
        other => Err(Error::invalid_argument(format!(
            "expected square RGB or grayscale input of side >= 8, got {other:?}"
        ))),
    }
}

/// Residual CNN scaled to desk size: one residual block, well under 100k
/// parameters.
pub fn build_toy_resnet(input_shape: &[usize], classes: usize) -> Result<ModelGraph> {
    build_toy_resnet_seeded(input_shape, classes, DEFAULT_BUILD_SEED)
}

pub fn build_toy_resnet_seeded(input_shape: &[usize], classes: usize, seed: u64) -> Result<ModelGraph> {
    check_image_input(input_shape)?;
    let mut b = GraphBuilder::new(input_shape, seed);
    b.conv(8, 3, 1, 1).relu();
    let trunk = b.last_index();
    b.conv(8, 3, 1, 1).relu().conv(8, 3, 1, 1);
    let branch = b.last_index();
    b.add(branch, trunk).relu();
    b.max_pool(2).conv(16, 3, 1, 1).relu().avg_pool(2);
    b.flatten().dense(classes);
    let model = b.finish(classes)?;
    debug_assert!(model.param_count() <= 100_000);
    Ok(model)
}

/// Depthwise-separable CNN: two depthwise + pointwise blocks.
pub fn build_toy_dscnn(input_shape: &[usize], classes: usize) -> Result<ModelGraph> {
    build_toy_dscnn_seeded(input_shape, classes, DEFAULT_BUILD_SEED)
}

pub fn build_toy_dscnn_seeded(input_shape: &[usize], classes: usize, seed: u64) -> Result<ModelGraph> {
    check_image_input(input_shape)?;
    let mut b = GraphBuilder::new(input_shape, seed);
    b.conv(8, 3, 1, 1).relu();
    b.depthwise(3, 1, 1).relu().conv(16, 1, 1, 0).relu();
    b.max_pool(2);
    b.depthwise(3, 1, 1).relu().conv(16, 1, 1, 0).relu();
    b.avg_pool(2);
    b.flatten().dense(classes);
    let model = b.finish(classes)?;
    debug_assert!(model.param_count() <= 100_000);
    Ok(model)
}

/// Re-draw every parameter tensor in place with a fresh seeded stream.
pub(super) fn reinit_params(model: &mut ModelGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for node in model.nodes_mut() {
        let fan_in = match node.layer {
            LayerSpec::Conv2d { kernel, .. } => {
                let c_in = node.params[0].shape()[2];
                kernel * kernel * c_in
            }
            LayerSpec::DepthwiseConv2d { kernel, .. } => kernel * kernel,
            LayerSpec::Dense { .. } => node.params[0].shape()[0],
            _ => continue,
        };
        let w_shape = node.params[0].shape().to_vec();
        node.params[0] = init_weight(&mut rng, w_shape, fan_in);
        let b_shape = node.params[1].shape().to_vec();
        node.params[1] = Tensor::zeros(&b_shape);
    }
}
