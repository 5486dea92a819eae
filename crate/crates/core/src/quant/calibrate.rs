//! Min/max calibration over a representative dataset.
//!
//! Weights are quantized symmetrically; activations asymmetrically for int8
//! and symmetrically for int16, mirroring the reference deployment stack.
//! The statistic is the exact min/max over the calibration set — no
//! percentile clipping.

use super::QuantParams;
use crate::error::{Error, Result};
use crate::model::{Dataset, ModelGraph};

/// Quantization parameters for every tensor boundary of a model.
#[derive(Debug, Clone)]
pub struct ModelQuantParams {
    pub bits: u8,
    pub input: QuantParams,
    /// One per graph node output, in node order.
    pub node_outputs: Vec<QuantParams>,
    /// Weight params per node (None for parameter-free layers).
    pub weights: Vec<Option<QuantParams>>,
}

#[derive(Clone, Copy)]
struct Range {
    min: f32,
    max: f32,
}

impl Range {
    fn empty() -> Self {
        Range { min: f32::INFINITY, max: f32::NEG_INFINITY }
    }

    fn observe_slice(&mut self, data: &[f32]) {
        for &v in data {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }

    fn merge(&mut self, other: &Range) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
    }
}

/// Observe per-tensor ranges over the calibration set and derive params.
pub fn calibrate(model: &ModelGraph, calib: &Dataset, bits: u8) -> Result<ModelQuantParams> {
    if bits != 8 && bits != 16 {
        return Err(Error::invalid_argument(format!(
            "bit-width {bits} not supported; policy allows 8 or 16"
        )));
    }
    if calib.is_empty() {
        return Err(Error::invalid_argument("calibration set is empty"));
    }
    let n_nodes = model.nodes().len();

    // Per-sample ranges in parallel, merged in index order.
    let per_sample: Vec<Result<(Range, Vec<Range>)>> =
        crate::par::map_indexed(calib.len(), |i| {
            let x = &calib.images[i];
            let mut input_range = Range::empty();
            input_range.observe_slice(x.data());
            let outputs = model.eval_nodes(x)?;
            let ranges = outputs
                .iter()
                .map(|t| {
                    let mut r = Range::empty();
                    r.observe_slice(t.data());
                    r
                })
                .collect();
            Ok((input_range, ranges))
        });

    let mut input_range = Range::empty();
    let mut node_ranges = vec![Range::empty(); n_nodes];
    for r in per_sample {
        let (ir, nrs) = r?;
        input_range.merge(&ir);
        for (acc, nr) in node_ranges.iter_mut().zip(&nrs) {
            acc.merge(nr);
        }
    }

    let act_symmetric = bits == 16;
    let input = QuantParams::from_range(input_range.min, input_range.max, bits, act_symmetric)?;
    let node_outputs = node_ranges
        .iter()
        .map(|r| QuantParams::from_range(r.min, r.max, bits, act_symmetric))
        .collect::<Result<Vec<_>>>()?;

    let weights = model
        .nodes()
        .iter()
        .map(|n| -> Result<Option<QuantParams>> {
            match n.params.first() {
                Some(w) => {
                    let mut r = Range::empty();
                    r.observe_slice(w.data());
                    Ok(Some(QuantParams::from_range(r.min, r.max, bits, true)?))
                }
                None => Ok(None),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ModelQuantParams { bits, input, node_outputs, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::dataset::{synthetic_shapes, Split};
    use crate::model::build_toy_resnet_seeded;

    #[test]
    fn calibration_round_trip_bound_holds_per_tensor() {
        let model = build_toy_resnet_seeded(&[16, 16, 3], 10, 2).unwrap();
        let calib = synthetic_shapes(16, 10, 16, 3, 0.05, 7, Split::Calibration).unwrap();
        let mqp = calibrate(&model, &calib, 8).unwrap();

        // Weight params symmetric, activation params asymmetric for int8.
        for w in mqp.weights.iter().flatten() {
            assert!(w.symmetric);
            assert_eq!(w.zero_point, 0);
        }
        assert!(!mqp.input.symmetric);

        // Round-trip error <= scale/2 for observed values.
        let outputs = model.eval_nodes(&calib.images[0]).unwrap();
        for (t, p) in outputs.iter().zip(&mqp.node_outputs) {
            for &v in t.data() {
                let rt = p.dequantize_value(p.quantize_value(v));
                assert!((rt - v).abs() as f64 <= p.scale / 2.0 + 1e-9);
            }
        }
    }

    #[test]
    fn int16_activations_are_symmetric() {
        let model = build_toy_resnet_seeded(&[16, 16, 3], 10, 2).unwrap();
        let calib = synthetic_shapes(4, 10, 16, 3, 0.05, 7, Split::Calibration).unwrap();
        let mqp = calibrate(&model, &calib, 16).unwrap();
        assert!(mqp.input.symmetric);
        assert!(mqp.node_outputs.iter().all(|p| p.symmetric && p.zero_point == 0));
    }

    #[test]
    fn rejects_bits_12_and_empty_set() {
        let model = build_toy_resnet_seeded(&[16, 16, 3], 10, 2).unwrap();
        let calib = synthetic_shapes(4, 10, 16, 3, 0.05, 7, Split::Calibration).unwrap();
        assert!(calibrate(&model, &calib, 12).is_err());
        let empty = Dataset { images: vec![], labels: vec![], classes: 10, split: Split::Calibration };
        assert!(calibrate(&model, &empty, 8).is_err());
    }
}
