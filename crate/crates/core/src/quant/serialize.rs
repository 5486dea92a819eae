//! Quantized-model file: the model container with a quantization section
//! (per-tensor scale as a 64-bit real, zero-point, bits, multiplier/shift
//! pairs) followed by integer weight blobs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::qmodel::{QNode, RequantOp};
use super::{IntTensor, QuantParams, QuantizedModel};
use crate::error::{Error, Result};
use crate::model::{LayerSpec, NodeInput};

use crate::model::serialize::{
    container_prefix, read_container_header, read_i32_blob, write_i32_blob, Reader, KIND_QUANTIZED,
};

#[derive(Serialize, Deserialize)]
struct QNodeDesc {
    layer: LayerSpec,
    inputs: Vec<NodeInput>,
    weight_shape: Option<Vec<usize>>,
    weight_params: Option<QuantParams>,
    bias_shape: Option<Vec<usize>>,
    out_params: QuantParams,
    requant: RequantOp,
    acc_statically_safe: bool,
}

#[derive(Serialize, Deserialize)]
struct QuantHeader {
    input_shape: Vec<usize>,
    num_classes: usize,
    bits: u8,
    input_params: QuantParams,
    nodes: Vec<QNodeDesc>,
}

pub fn save_quantized_model(qm: &QuantizedModel, path: &Path) -> Result<()> {
    let header = QuantHeader {
        input_shape: qm.input_shape.clone(),
        num_classes: qm.num_classes,
        bits: qm.bits,
        input_params: qm.input_params,
        nodes: qm
            .nodes
            .iter()
            .map(|n| QNodeDesc {
                layer: n.layer,
                inputs: n.inputs.clone(),
                weight_shape: n.weights.as_ref().map(|w| w.shape.clone()),
                weight_params: n.weight_params,
                bias_shape: n.bias.as_ref().map(|b| b.shape.clone()),
                out_params: n.out_params,
                requant: n.requant,
                acc_statically_safe: n.acc_statically_safe,
            })
            .collect(),
    };
    let mut out = container_prefix(KIND_QUANTIZED, &header);
    for node in &qm.nodes {
        if let Some(w) = &node.weights {
            write_i32_blob(&mut out, &w.data);
        }
        if let Some(b) = &node.bias {
            write_i32_blob(&mut out, &b.data);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_quantized_model(path: &Path) -> Result<QuantizedModel> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    let header: QuantHeader = read_container_header(&mut r, KIND_QUANTIZED)?;
    let mut nodes = Vec::with_capacity(header.nodes.len());
    for desc in header.nodes {
        let weights = match &desc.weight_shape {
            Some(shape) => {
                let numel: usize = shape.iter().product();
                Some(IntTensor { shape: shape.clone(), data: read_i32_blob(&mut r, numel)? })
            }
            None => None,
        };
        let bias = match &desc.bias_shape {
            Some(shape) => {
                let numel: usize = shape.iter().product();
                Some(IntTensor { shape: shape.clone(), data: read_i32_blob(&mut r, numel)? })
            }
            None => None,
        };
        nodes.push(QNode {
            layer: desc.layer,
            inputs: desc.inputs,
            weights,
            weight_params: desc.weight_params,
            bias,
            out_params: desc.out_params,
            requant: desc.requant,
            acc_statically_safe: desc.acc_statically_safe,
        });
    }
    if !r.done() {
        return Err(Error::Format {
            offset: r.offset(),
            message: "trailing bytes after integer blobs".into(),
        });
    }
    Ok(QuantizedModel {
        input_shape: header.input_shape,
        num_classes: header.num_classes,
        bits: header.bits,
        input_params: header.input_params,
        nodes,
    })
}
