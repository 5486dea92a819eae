//! Integer kernels versus the fake-quant float simulation, plus the
//! quantization lattice invariants as property tests.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qwb_core::model::dataset::{synthetic_shapes, Split};
use qwb_core::model::{build_toy_dscnn_seeded, build_toy_resnet_seeded, ModelGraph};
use qwb_core::quant::{
    fake_quant_infer, integer_infer, quantize_model, quantize_tensor, QuantParams,
};
use qwb_core::Tensor;

fn random_model(seed: u64) -> ModelGraph {
    if seed % 2 == 0 {
        build_toy_resnet_seeded(&[16, 16, 3], 10, seed).unwrap()
    } else {
        build_toy_dscnn_seeded(&[16, 16, 3], 10, seed).unwrap()
    }
}

fn random_image(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        vec![16, 16, 3],
        (0..16 * 16 * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

/// Integer inference must agree with the fake-quant oracle within one LSB of
/// the logit lattice, per logit.
fn assert_conformance(bits: u8, models: u64, inputs_per_model: usize) {
    for seed in 0..models {
        let model = random_model(seed);
        let calib = synthetic_shapes(8, 10, 16, 3, 0.1, seed ^ 0xca11b, Split::Calibration).unwrap();
        let qm = quantize_model(&model, &calib, bits).unwrap();
        let lsb = qm.logits_params().lsb();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1f);
        for _ in 0..inputs_per_model {
            let x = random_image(&mut rng);
            let (int_logits, _) = integer_infer(&qm, &x).unwrap();
            let fq_logits = fake_quant_infer(&qm, &x).unwrap();
            for (a, b) in int_logits.data().iter().zip(fq_logits.data()) {
                assert!(
                    (a - b).abs() <= lsb + 1e-6,
                    "bits={bits} seed={seed}: |{a} - {b}| > lsb {lsb}"
                );
            }
        }
    }
}

#[test]
fn integer_matches_fake_quant_int8() {
    assert_conformance(8, 10, 4);
}

#[test]
fn integer_matches_fake_quant_int16() {
    assert_conformance(16, 10, 4);
}

/// Finer lattices land closer to the float forward on most inputs.
#[test]
fn int16_closer_to_float_than_int8() {
    let mut closer = 0usize;
    let mut total = 0usize;
    for seed in 0..5u64 {
        let model = random_model(seed);
        let calib = synthetic_shapes(8, 10, 16, 3, 0.1, seed ^ 0xca11b, Split::Calibration).unwrap();
        let q8 = quantize_model(&model, &calib, 8).unwrap();
        let q16 = quantize_model(&model, &calib, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2f);
        for _ in 0..10 {
            let x = random_image(&mut rng);
            let float_logits = model.forward(&x).unwrap();
            let l8 = fake_quant_infer(&q8, &x).unwrap();
            let l16 = fake_quant_infer(&q16, &x).unwrap();
            let d8: f64 = float_logits
                .data()
                .iter()
                .zip(l8.data())
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            let d16: f64 = float_logits
                .data()
                .iter()
                .zip(l16.data())
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            total += 1;
            if d16 <= d8 {
                closer += 1;
            }
        }
    }
    assert!(
        closer as f64 / total as f64 >= 0.9,
        "int16 closer on {closer}/{total} inputs"
    );
}

/// Accumulators refuse to wrap: a dense layer wide enough to exceed the
/// int32 range must raise the overflow error, naming the layer.
#[test]
fn int8_accumulator_overflow_is_detected() {
    use qwb_core::model::{GraphNode, LayerSpec, NodeInput};
    let n_in = 70_000usize;
    let w = Tensor::filled(&[n_in, 1], 1.0);
    let b = Tensor::zeros(&[1]);
    let node = GraphNode {
        layer: LayerSpec::Dense { units: 1 },
        inputs: vec![NodeInput::NetworkInput],
        params: vec![w, b],
    };
    let model = ModelGraph::new(vec![n_in], 1, vec![node]).unwrap();
    // Calibration images: constant 1.0 pixels maximize the codes.
    let images = vec![Tensor::filled(&[n_in], 1.0)];
    let calib = qwb_core::model::Dataset::new(images, vec![0], 1, Split::Calibration).unwrap();
    let qm = quantize_model(&model, &calib, 8).unwrap();
    match integer_infer(&qm, &Tensor::filled(&[n_in], 1.0)) {
        Err(qwb_core::Error::InternalOverflow { layer: 0, .. }) => {}
        other => panic!("expected overflow error, got {other:?}"),
    }
}

proptest! {
    /// Round-trip bound on the representable range, all four (bits, symmetry)
    /// combinations.
    #[test]
    fn round_trip_within_half_scale(
        lo in -10.0f32..0.0,
        width in 0.1f32..20.0,
        x01 in 0.0f32..1.0,
        bits in prop::sample::select(vec![8u8, 16u8]),
        symmetric in any::<bool>(),
    ) {
        let hi = lo + width;
        let p = QuantParams::from_range(lo, hi, bits, symmetric).unwrap();
        let (rep_lo, rep_hi) = if symmetric {
            let bound = lo.abs().max(hi.abs());
            (-bound, bound)
        } else {
            (lo.min(0.0), hi.max(0.0))
        };
        let x = rep_lo + x01 * (rep_hi - rep_lo);
        let rt = p.dequantize_value(p.quantize_value(x));
        prop_assert!(
            ((rt - x).abs() as f64) <= p.scale / 2.0 + 1e-6,
            "x={x} rt={rt} scale={}", p.scale
        );
    }

    /// Saturation: codes never leave [qmin, qmax], whatever the input.
    #[test]
    fn quantize_saturates(
        x in -1e6f32..1e6,
        bits in prop::sample::select(vec![8u8, 16u8]),
        symmetric in any::<bool>(),
    ) {
        let p = QuantParams::from_range(-1.0, 1.0, bits, symmetric).unwrap();
        let q = p.quantize_value(x);
        prop_assert!(q >= p.qmin() && q <= p.qmax());
    }

    /// Bucket invariance at tensor level: values inside the same bucket give
    /// the same codes.
    #[test]
    fn same_bucket_same_codes(v in 0.0f32..1.0, jitter in -0.49f32..0.49) {
        let p = QuantParams::from_range(0.0, 1.0, 8, false).unwrap();
        let center = p.dequantize_value(p.quantize_value(v));
        let jittered = center + jitter * p.scale as f32;
        let a = quantize_tensor(&Tensor::scalar(center), &p);
        let b = quantize_tensor(&Tensor::scalar(jittered), &p);
        prop_assert_eq!(a.data, b.data);
    }
}
