//! Feature squeezing: color bit-depth reduction followed by per-channel
//! median smoothing, plus the L1-margin adversarial detector.

use super::FeatureSqueezeConfig;
use crate::error::{Error, Result};
use crate::oracle::ScoreOracle;
use crate::tensor::Tensor;

/// Round an even window to the nearest odd value no smaller than 3, ties
/// downward (2 -> 3, 4 -> 3, 6 -> 5); odd inputs pass through.
pub fn adjust_window(window: usize) -> usize {
    if window % 2 == 1 {
        window
    } else if window <= 3 {
        3
    } else {
        window - 1
    }
}

/// Squeeze an image: quantize colors to `bit_depth` levels (round half away
/// from zero), then median-filter each channel with edge-replicate padding.
pub fn feature_squeeze(x: &Tensor, bit_depth: u8, window: usize) -> Result<Tensor> {
    if !(1..=8).contains(&bit_depth) {
        return Err(Error::invalid_argument("bit depth must be in [1, 8]"));
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid_argument("median window must be odd and >= 1"));
    }
    let levels = ((1u32 << bit_depth) - 1) as f32;
    let rounded = x.map(|v| (v * levels).round() / levels);
    if window == 1 {
        return Ok(rounded);
    }

    let (h, w, c) = match rounded.shape() {
        [h, w, c] => (*h, *w, *c),
        [n] => (*n, 1, 1),
        s => {
            return Err(Error::shape_mismatch(format!(
                "feature_squeeze expects an image, got {s:?}"
            )))
        }
    };
    let half = window / 2;
    let mut out = vec![0.0f32; rounded.numel()];
    let mut patch = Vec::with_capacity(window * window);
    for y in 0..h {
        for x_pos in 0..w {
            for ch in 0..c {
                patch.clear();
                for dy in 0..window {
                    for dx in 0..window {
                        // Edge-replicate padding.
                        let sy = (y + dy).saturating_sub(half).min(h - 1);
                        let sx = (x_pos + dx).saturating_sub(half).min(w - 1);
                        patch.push(rounded.data()[(sy * w + sx) * c + ch]);
                    }
                }
                patch.sort_by(|a, b| a.partial_cmp(b).unwrap());
                out[(y * w + x_pos) * c + ch] = patch[patch.len() / 2];
            }
        }
    }
    Tensor::new(rounded.shape().to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqueezeDetection {
    pub adversarial: bool,
    pub l1_margin: f32,
}

/// Compare oracle scores on the raw and squeezed sample: a large L1 gap marks
/// the input as adversarial.
pub fn squeeze_detect<S: ScoreOracle>(
    score: &S,
    x: &Tensor,
    cfg: &FeatureSqueezeConfig,
) -> Result<SqueezeDetection> {
    cfg.validate()?;
    let squeezed = feature_squeeze(x, cfg.bit_depth, cfg.window)?;
    let p_raw = score.probabilities(x)?;
    let p_sq = score.probabilities(&squeezed)?;
    let l1_margin: f32 = p_raw
        .data()
        .iter()
        .zip(p_sq.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum();
    Ok(SqueezeDetection { adversarial: l1_margin > cfg.detect_threshold, l1_margin })
}
