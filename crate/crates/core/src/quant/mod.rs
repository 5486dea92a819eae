//! Post-training quantization: per-tensor scale/zero-point parameters,
//! half-away-from-zero rounding, and fixed-point requantization multipliers.

mod calibrate;
mod qmodel;
mod serialize;

pub use calibrate::{calibrate, ModelQuantParams};
pub use qmodel::{
    dequantize_model, fake_quant_infer, integer_infer, quantize_adversarial_input, quantize_model,
    QuantizedModel,
};
pub use serialize::{load_quantized_model, save_quantized_model};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-tensor quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    /// Stored as f64: the file format carries a 64-bit real and the requant
    /// multiplier reconstruction bound is tighter than f32 resolution.
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u8,
    pub symmetric: bool,
}

impl QuantParams {
    pub fn qmin(&self) -> i32 {
        match (self.bits, self.symmetric) {
            (8, true) => -127,
            (8, false) => -128,
            (16, true) => -32767,
            _ => -32768,
        }
    }

    pub fn qmax(&self) -> i32 {
        match self.bits {
            8 => 127,
            _ => 32767,
        }
    }

    /// Derive params from an observed value range.
    ///
    /// Activation ranges are nudged to include zero first so that the real
    /// value 0 has an exact code (required for zero padding); a degenerate
    /// range (max == min after the nudge) falls back to scale 1, zero-point 0.
    pub fn from_range(min: f32, max: f32, bits: u8, symmetric: bool) -> Result<Self> {
        if bits != 8 && bits != 16 {
            return Err(Error::invalid_argument(format!(
                "bit-width {bits} not supported; policy allows 8 or 16"
            )));
        }
        if !min.is_finite() || !max.is_finite() || min > max {
            return Err(Error::numeric(format!("invalid calibration range [{min}, {max}]")));
        }
        let mut p = QuantParams { scale: 1.0, zero_point: 0, bits, symmetric };
        if symmetric {
            let bound = min.abs().max(max.abs()) as f64;
            if bound > 0.0 {
                p.scale = bound / p.qmax() as f64;
            }
        } else {
            let lo = min.min(0.0) as f64;
            let hi = max.max(0.0) as f64;
            if hi > lo {
                p.scale = (hi - lo) / (p.qmax() - p.qmin()) as f64;
                p.zero_point = p.qmin() - (lo / p.scale).round() as i32;
            }
        }
        Ok(p)
    }

    /// `clamp(round(x / scale) + zero_point, qmin, qmax)`, round half away
    /// from zero.
    pub fn quantize_value(&self, x: f32) -> i32 {
        let q = (x as f64 / self.scale).round() as i64 + self.zero_point as i64;
        q.clamp(self.qmin() as i64, self.qmax() as i64) as i32
    }

    pub fn dequantize_value(&self, q: i32) -> f32 {
        ((q as i64 - self.zero_point as i64) as f64 * self.scale) as f32
    }

    /// Width of one quantization bucket in real units.
    pub fn lsb(&self) -> f32 {
        self.scale as f32
    }
}

/// Dense integer tensor (codes are stored widened to i32 regardless of
/// bit-width).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
}

impl IntTensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Quantize a float tensor onto the integer lattice.
pub fn quantize_tensor(x: &Tensor, p: &QuantParams) -> IntTensor {
    IntTensor {
        shape: x.shape().to_vec(),
        data: x.data().iter().map(|&v| p.quantize_value(v)).collect(),
    }
}

/// Exact inverse map of the lattice: `(q - zero_point) * scale`.
pub fn dequantize_tensor(q: &IntTensor, p: &QuantParams) -> Tensor {
    Tensor::new(
        q.shape.clone(),
        q.data.iter().map(|&v| p.dequantize_value(v)).collect(),
    )
    .expect("int tensor shape is valid")
}

/// Fixed-point representation of a positive real multiplier:
/// `value = multiplier * 2^(exponent - 31)` with `multiplier` in
/// `[2^30, 2^31)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Requant {
    pub multiplier: i32,
    pub exponent: i32,
}

impl Requant {
    pub fn from_real(m: f64) -> Result<Self> {
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::numeric(format!("requant multiplier must be positive, got {m}")));
        }
        let mut mant = m;
        let mut exponent = 0i32;
        while mant >= 1.0 {
            mant /= 2.0;
            exponent += 1;
        }
        while mant < 0.5 {
            mant *= 2.0;
            exponent -= 1;
        }
        let mut q = (mant * (1u64 << 31) as f64).round() as i64;
        if q == 1 << 31 {
            q >>= 1;
            exponent += 1;
        }
        Ok(Requant { multiplier: q as i32, exponent })
    }

    /// Reconstructed real value; within 2^-30 relative of the original.
    pub fn real(&self) -> f64 {
        self.multiplier as f64 * 2f64.powi(self.exponent - 31)
    }

    /// `round(acc * value)` with half-away-from-zero rounding, exactly.
    pub fn apply(&self, acc: i64) -> i64 {
        let prod = acc as i128 * self.multiplier as i128;
        let shift = 31 - self.exponent;
        if shift <= 0 {
            return (prod << (-shift) as u32) as i64;
        }
        let half = 1i128 << (shift - 1);
        let rounded = if prod >= 0 {
            (prod + half) >> shift
        } else {
            -((-prod + half) >> shift)
        };
        rounded as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_range_example() {
        // [0, 2.55] int8 asymmetric: scale 0.01, zero-point -128. The f32
        // literal 2.55 is a hair below the decimal value, hence the 1e-9 slop.
        let p = QuantParams::from_range(0.0, 2.55, 8, false).unwrap();
        assert!((p.scale - 0.01).abs() < 1e-9);
        assert_eq!(p.zero_point, -128);
    }

    #[test]
    fn symmetric_weight_example() {
        let p = QuantParams::from_range(-1.0, 1.0, 8, true).unwrap();
        assert!((p.scale - 1.0 / 127.0).abs() < 1e-15);
        assert_eq!(p.zero_point, 0);
    }

    #[test]
    fn degenerate_range_rule() {
        let p = QuantParams::from_range(0.0, 0.0, 8, false).unwrap();
        assert_eq!(p.scale, 1.0);
        assert_eq!(p.zero_point, 0);
        let p = QuantParams::from_range(0.0, 0.0, 16, true).unwrap();
        assert_eq!(p.scale, 1.0);
    }

    #[test]
    fn bits_12_rejected() {
        assert!(QuantParams::from_range(0.0, 1.0, 12, false).is_err());
    }

    #[test]
    fn quantize_rounds_half_away_and_saturates() {
        let p = QuantParams { scale: 0.5, zero_point: 0, bits: 8, symmetric: true };
        assert_eq!(p.quantize_value(1.2), 2);
        assert_eq!(p.quantize_value(1.25), 3); // 2.5 rounds away from zero
        assert_eq!(p.quantize_value(-1.25), -3);
        let unit = QuantParams { scale: 1.0, zero_point: 0, bits: 8, symmetric: false };
        assert_eq!(unit.quantize_value(300.0), 127);
        assert_eq!(unit.quantize_value(-300.0), -128);
    }

    #[test]
    fn dequantize_examples() {
        let p = QuantParams { scale: 0.5, zero_point: 0, bits: 8, symmetric: true };
        assert_eq!(p.dequantize_value(2), 1.0);
        let p2 = QuantParams { scale: 0.3, zero_point: -7, bits: 8, symmetric: false };
        assert_eq!(p2.dequantize_value(-7), 0.0);
    }

    #[test]
    fn round_trip_bound_over_range() {
        let p = QuantParams::from_range(-0.3, 1.7, 8, false).unwrap();
        let half = (p.scale / 2.0) as f32;
        for i in 0..=1000 {
            let x = -0.3 + 2.0 * i as f32 / 1000.0;
            let rt = p.dequantize_value(p.quantize_value(x));
            assert!((rt - x).abs() <= half + 1e-7, "x={x} rt={rt}");
        }
    }

    #[test]
    fn dequantize_idempotent_on_lattice() {
        let p = QuantParams::from_range(-0.9, 1.1, 8, false).unwrap();
        let x = Tensor::new(vec![3], vec![-0.5, 0.0, 1.05]).unwrap();
        let once = dequantize_tensor(&quantize_tensor(&x, &p), &p);
        let twice = dequantize_tensor(&quantize_tensor(&once, &p), &p);
        assert_eq!(once, twice);
    }

    #[test]
    fn requant_reconstruction_within_2_pow_30() {
        for &m in &[1.0, 0.5, 0.0039, 1.7e-4, 3.3, 123.456, 7.2e-9] {
            let r = Requant::from_real(m).unwrap();
            assert!(
                ((r.real() - m) / m).abs() <= 2f64.powi(-30),
                "m={m} rec={}",
                r.real()
            );
        }
    }

    #[test]
    fn requant_apply_matches_real_rounding() {
        let r = Requant::from_real(0.0625).unwrap();
        assert_eq!(r.apply(160), 10);
        assert_eq!(r.apply(-160), -10);
        // Half away from zero at the .5 boundary: 24 * 0.0625 = 1.5.
        assert_eq!(r.apply(24), 2);
        assert_eq!(r.apply(-24), -2);
    }
}
