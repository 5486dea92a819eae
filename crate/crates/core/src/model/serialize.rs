//! Self-describing binary model container: magic, format version, JSON graph
//! description, then little-endian raw parameter blobs.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{DefenseProvenance, GraphNode, LayerSpec, ModelGraph, NodeInput};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) const MAGIC: &[u8; 4] = b"QWBM";
pub(crate) const FORMAT_VERSION: u32 = 1;
pub(crate) const KIND_FLOAT: u8 = 0;
pub(crate) const KIND_QUANTIZED: u8 = 1;

/// Byte reader that reports the offset of the first malformed read.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated file: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Serialize container front matter plus a JSON header, returning the buffer
/// to append blobs to.
pub(crate) fn container_prefix<H: Serialize>(kind: u8, header: &H) -> Vec<u8> {
    let header_json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(header_json.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out
}

/// Validate front matter and parse the JSON header; the reader is left at the
/// first blob byte.
pub(crate) fn read_container_header<H: DeserializeOwned>(r: &mut Reader, expect_kind: u8) -> Result<H> {
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad magic {magic:?}") });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let kind = r.u8()?;
    if kind != expect_kind {
        return Err(Error::Format {
            offset: r.offset() - 1,
            message: format!("container kind {kind}, expected {expect_kind}"),
        });
    }
    let header_len = r.u64()? as usize;
    let header_start = r.offset();
    let header_bytes = r.take(header_len)?;
    serde_json::from_slice(header_bytes).map_err(|e| Error::Format {
        offset: header_start,
        message: format!("header JSON: {e}"),
    })
}

pub(crate) fn write_f32_blob(out: &mut Vec<u8>, data: &[f32]) {
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_f32_blob(r: &mut Reader, n: usize) -> Result<Vec<f32>> {
    let bytes = r.take(4 * n)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn write_i32_blob(out: &mut Vec<u8>, data: &[i32]) {
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_i32_blob(r: &mut Reader, n: usize) -> Result<Vec<i32>> {
    let bytes = r.take(4 * n)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct NodeDesc {
    layer: LayerSpec,
    inputs: Vec<NodeInput>,
    param_shapes: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct FloatHeader {
    input_shape: Vec<usize>,
    num_classes: usize,
    nodes: Vec<NodeDesc>,
    provenance: Option<DefenseProvenance>,
}

pub fn save_model(model: &ModelGraph, path: &Path) -> Result<()> {
    let header = FloatHeader {
        input_shape: model.input_shape().to_vec(),
        num_classes: model.num_classes(),
        nodes: model
            .nodes()
            .iter()
            .map(|n| NodeDesc {
                layer: n.layer,
                inputs: n.inputs.clone(),
                param_shapes: n.params.iter().map(|p| p.shape().to_vec()).collect(),
            })
            .collect(),
        provenance: model.provenance.clone(),
    };
    let mut out = container_prefix(KIND_FLOAT, &header);
    for node in model.nodes() {
        for p in &node.params {
            write_f32_blob(&mut out, p.data());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    let header: FloatHeader = read_container_header(&mut r, KIND_FLOAT)?;
    let mut nodes = Vec::with_capacity(header.nodes.len());
    for desc in &header.nodes {
        let mut params = Vec::with_capacity(desc.param_shapes.len());
        for shape in &desc.param_shapes {
            let numel: usize = shape.iter().product();
            let data = read_f32_blob(&mut r, numel)?;
            params.push(Tensor::new(shape.clone(), data)?);
        }
        nodes.push(GraphNode { layer: desc.layer, inputs: desc.inputs.clone(), params });
    }
    if !r.done() {
        return Err(Error::Format {
            offset: r.offset(),
            message: "trailing bytes after parameter blobs".into(),
        });
    }
    let mut model = ModelGraph::new(header.input_shape, header.num_classes, nodes)?;
    model.provenance = header.provenance;
    Ok(model)
}
