//! Cross-attack contracts on a trained toy model: pixel-box membership,
//! success-flag consistency with a fresh oracle query, oracle-tier
//! separation (no gradient queries from score/decision attacks), seed
//! determinism, and the DeepFool linear-classifier oracle.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qwb_core::attack::{
    boundary_attack, cw, deepfool, ead, fgsm, geoda, jsma, pgd, square_attack, zoo,
    AdversarialResult, BoundaryConfig, CwConfig, DeepFoolConfig, EadConfig, GeodaConfig,
    JsmaConfig, Norm, PgdConfig, SquareConfig, ZooConfig,
};
use qwb_core::model::dataset::{synthetic_shapes, Split};
use qwb_core::model::{build_toy_dscnn_seeded, evaluate_accuracy, train, ModelGraph, TrainConfig};
use qwb_core::oracle::{FloatOracle, GradientOracle, LinearOracle};
use qwb_core::Tensor;

struct Fixture {
    model: ModelGraph,
    samples: Vec<(Tensor, usize)>,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let template = build_toy_dscnn_seeded(&[16, 16, 3], 4, 2).unwrap();
        let train_set = synthetic_shapes(512, 4, 16, 3, 0.06, 11, Split::Train).unwrap();
        let cfg = TrainConfig { epochs: 10, seed: 3, ..TrainConfig::default() };
        let (model, _) = train(&template, &train_set, &cfg).unwrap();
        let test_set = synthetic_shapes(24, 4, 16, 3, 0.06, 12, Split::Test).unwrap();
        let acc = evaluate_accuracy(&model, &test_set).unwrap();
        assert!(acc > 0.8, "fixture model should learn shapes, got {acc}");
        let samples = test_set
            .images
            .into_iter()
            .zip(test_set.labels)
            .take(4)
            .collect();
        Fixture { model, samples }
    })
}

fn check_result_contracts(r: &AdversarialResult, oracle: &FloatOracle) {
    assert!(
        r.adversarial.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
        "adversarial outside the pixel box"
    );
    // Success flag must agree with a fresh oracle decision.
    let fresh = oracle.model().forward(&r.adversarial).unwrap().argmax();
    assert_eq!(fresh, r.predicted_label, "stale predicted label");
    assert_eq!(r.success, fresh != r.original_label, "stale success flag");
    // Norm ordering holds for every stored result.
    assert!(r.distortions.linf <= r.distortions.l2 + 1e-5);
    assert!(r.distortions.l2 <= r.distortions.l1 + 1e-4);
}

#[test]
fn white_box_attacks_respect_result_contracts() {
    let fx = fixture();
    let oracle = FloatOracle::new(&fx.model);
    for (x, y) in &fx.samples {
        let results = vec![
            fgsm(&oracle, x, *y, 0.02).unwrap(),
            deepfool(&oracle, x, *y, &DeepFoolConfig::default()).unwrap(),
            jsma(&oracle, x, *y, &JsmaConfig::default()).unwrap(),
            pgd(&oracle, x, *y, &PgdConfig { eps: 0.02, step: 0.005, max_iter: 8, restarts: 2, seed: 1 }).unwrap(),
            cw(&oracle, x, *y, Norm::L2, &CwConfig { max_iter: 15, bs_steps: 3, ..CwConfig::default() }).unwrap(),
            ead(&oracle, x, *y, &EadConfig { max_iter: 15, bs_steps: 3, ..EadConfig::default() }).unwrap(),
        ];
        for r in &results {
            check_result_contracts(r, &oracle);
        }
    }
}

#[test]
fn eps_bound_attacks_stay_inside_the_ball() {
    let fx = fixture();
    let oracle = FloatOracle::new(&fx.model);
    let eps = 0.015f32;
    for (x, y) in &fx.samples {
        let f = fgsm(&oracle, x, *y, eps).unwrap();
        assert!(f.distortions.linf <= eps + 1e-7);
        let p = pgd(&oracle, x, *y, &PgdConfig { eps, step: 0.003, max_iter: 10, restarts: 2, seed: 5 }).unwrap();
        assert!(p.distortions.linf <= eps + 1e-7);
        let s = square_attack(
            &oracle,
            x,
            *y,
            Norm::Linf,
            &SquareConfig { eps, max_iter: 60, init_fraction: 0.3, seed: 5 },
        )
        .unwrap();
        assert!(s.distortions.linf <= eps + 1e-6);
    }
}

/// Score- and decision-tier attacks must never touch the gradient machinery;
/// the FloatOracle gradient counter audits this.
#[test]
fn black_box_attacks_issue_zero_gradient_queries() {
    let fx = fixture();
    let oracle = FloatOracle::new(&fx.model);
    let (x, y) = &fx.samples[0];
    let _ = zoo(&oracle, x, *y, &ZooConfig { max_iter: 3, bs_steps: 1, coords_per_step: 4, ..ZooConfig::default() });
    let _ = square_attack(&oracle, x, *y, Norm::Linf, &SquareConfig { max_iter: 40, ..SquareConfig::default() });
    let _ = boundary_attack(&oracle, x, *y, &BoundaryConfig { max_iter: 30, init_size: 50, ..BoundaryConfig::default() });
    let _ = geoda(&oracle, x, *y, &GeodaConfig { dct_dim: 40, probes: 30, init_size: 50, ..GeodaConfig::default() });
    assert_eq!(
        oracle.gradient_queries(),
        0,
        "gray/black-box attacks consumed gradient queries"
    );
}

#[test]
fn stochastic_attacks_are_seed_deterministic() {
    let fx = fixture();
    let oracle = FloatOracle::new(&fx.model);
    let (x, y) = &fx.samples[1];
    let sq_cfg = SquareConfig { eps: 0.05, max_iter: 80, init_fraction: 0.3, seed: 21 };
    let a = square_attack(&oracle, x, *y, Norm::Linf, &sq_cfg).unwrap();
    let b = square_attack(&oracle, x, *y, Norm::Linf, &sq_cfg).unwrap();
    assert_eq!(a.adversarial.data(), b.adversarial.data());

    let ba_cfg = BoundaryConfig { max_iter: 40, init_size: 60, seed: 22, ..BoundaryConfig::default() };
    let a = boundary_attack(&oracle, x, *y, &ba_cfg);
    let b = boundary_attack(&oracle, x, *y, &ba_cfg);
    match (a, b) {
        (Ok(a), Ok(b)) => assert_eq!(a.adversarial.data(), b.adversarial.data()),
        (Err(_), Err(_)) => {}
        other => panic!("divergent outcomes: {other:?}"),
    }
}

/// DeepFool against fifty random linear classifiers: the returned L2 must
/// sit within 5% of the analytic distance |f(x)| / ||w|| scaled by the
/// overshoot.
#[test]
fn deepfool_linear_oracle_fifty_classifiers() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let dim = 16usize;
    for trial in 0..50 {
        let w: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let x: Vec<f32> = (0..dim).map(|_| rng.gen_range(0.3f32..0.7)).collect();
        let w_norm = w.iter().map(|&v| v * v).sum::<f32>().sqrt();
        // Place the boundary at a small analytic distance so the crossing
        // stays strictly inside the pixel box.
        let target_dist = rng.gen_range(0.02f32..0.15);
        let wx: f32 = w.iter().zip(&x).map(|(&a, &b)| a * b).sum();
        let bias = -(wx) + target_dist * w_norm;
        // Logit gap Z1 - Z0 = w.x + bias, positive at x: class 1, distance
        // |gap| / ||w|| = target_dist.
        let model = LinearOracle::new(vec![vec![0.0; dim], w.clone()], vec![0.0, bias]);
        let x_t = Tensor::new(vec![dim], x.clone()).unwrap();
        assert_eq!(model.logits(&x_t).unwrap().argmax(), 1);
        let r = deepfool(&model, &x_t, 1, &DeepFoolConfig::default()).unwrap();
        assert!(r.success, "trial {trial}: deepfool must cross a linear boundary");
        let expected = target_dist * 1.008;
        let rel = (r.distortions.l2 - expected).abs() / expected;
        assert!(
            rel <= 0.05,
            "trial {trial}: l2 {} vs analytic {expected} (rel {rel})",
            r.distortions.l2
        );
    }
}
