//! Zeroth-Order Optimization: the C&W-L2 objective driven by central
//! finite-difference estimates over randomly sampled coordinates — a
//! score-oracle attack that never touches gradients.

use rand::Rng;

use super::common::{per_sample_seed, rng_from, AdversarialResult};
use super::config::ZooConfig;
use crate::error::{Error, Result};
use crate::metrics::{distortion, Norm};
use crate::oracle::ScoreOracle;
use crate::tensor::Tensor;

/// Log-probability margin loss of the C&W objective, evaluated through the
/// score oracle.
fn margin_loss<S: ScoreOracle>(s: &S, x: &Tensor, y: usize) -> Result<f32> {
    let p = s.probabilities(x)?;
    let log_y = (p.data()[y].max(1e-30)).ln();
    let mut other = f32::NEG_INFINITY;
    for (k, &v) in p.data().iter().enumerate() {
        if k != y {
            other = other.max(v);
        }
    }
    Ok((log_y - other.max(1e-30).ln()).max(0.0))
}

pub fn zoo<S: ScoreOracle>(s: &S, x: &Tensor, y: usize, cfg: &ZooConfig) -> Result<AdversarialResult> {
    if !(cfg.h > 0.0) {
        return Err(Error::invalid_argument("zoo probe step h must be > 0"));
    }
    let before = s.queries();
    let n = x.numel();
    let mut rng = rng_from(per_sample_seed(cfg.seed, 0x200));
    let mut best: Option<(f32, Tensor, usize)> = None;
    let mut c = cfg.initial_c;
    let mut c_lo = 0.0f32;
    let mut c_hi = f32::INFINITY;
    let mut iterations = 0usize;

    for _ in 0..cfg.bs_steps.max(1) {
        let mut adv = x.clone();
        let mut succeeded = false;
        for _ in 0..cfg.max_iter {
            iterations += 1;
            let p = s.probabilities(&adv)?;
            if p.argmax() != y {
                succeeded = true;
                let l2 = distortion(x, &adv, Norm::L2)?;
                if best.as_ref().is_none_or(|(b, _, _)| l2 < *b) {
                    best = Some((l2, adv.clone(), p.argmax()));
                }
                break;
            }
            // Stochastic coordinate descent on ||delta||^2 + c * margin.
            let mut data = adv.data().to_vec();
            for _ in 0..cfg.coords_per_step.min(n) {
                let i = rng.gen_range(0..n);
                let objective = |probe: &Tensor| -> Result<f32> {
                    let m = margin_loss(s, probe, y)?;
                    let l2sq: f32 = probe
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&a, &b)| (a - b) * (a - b))
                        .sum();
                    Ok(l2sq + c * m)
                };
                let mut probe = Tensor::new(adv.shape().to_vec(), data.clone())?;
                let orig = probe.data()[i];
                probe.data_mut()[i] = orig + cfg.h;
                let plus = objective(&probe)?;
                probe.data_mut()[i] = orig - cfg.h;
                let minus = objective(&probe)?;
                let grad = ((plus as f64 - minus as f64) / (2.0 * cfg.h as f64)) as f32;
                data[i] = (orig - cfg.lr * grad).clamp(0.0, 1.0);
            }
            adv = Tensor::new(adv.shape().to_vec(), data)?;
        }
        if !succeeded {
            let p = s.probabilities(&adv)?;
            if p.argmax() != y {
                succeeded = true;
                let l2 = distortion(x, &adv, Norm::L2)?;
                if best.as_ref().is_none_or(|(b, _, _)| l2 < *b) {
                    best = Some((l2, adv.clone(), p.argmax()));
                }
            }
        }
        if succeeded {
            c_hi = c;
            c = 0.5 * (c_lo + c_hi);
        } else {
            c_lo = c;
            c = if c_hi.is_finite() { 0.5 * (c_lo + c_hi) } else { c * 10.0 };
        }
    }

    let queries = s.queries() - before;
    match best {
        Some((_, adv, pred)) => AdversarialResult::new(x.clone(), adv, y, pred, queries, iterations),
        None => Ok(AdversarialResult::failed(x.clone(), y, queries, iterations)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::LinearOracle;

    #[test]
    fn query_count_is_audited() {
        let model = LinearOracle::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]);
        let x = Tensor::new(vec![2], vec![0.8, 0.2]).unwrap();
        let cfg = ZooConfig { max_iter: 3, bs_steps: 1, coords_per_step: 2, ..ZooConfig::default() };
        let before = ScoreOracle::queries(&model);
        let r = zoo(&model, &x, 0, &cfg).unwrap();
        let spent = ScoreOracle::queries(&model) - before;
        assert_eq!(r.queries, spent);
        // Per iteration: 1 evaluation + 2 per coordinate probe. The attack
        // fails here (identity-ish model, strong margin), so the final extra
        // evaluation after the loop also counts.
        assert_eq!(spent, 3 * (1 + 2 * 2) + 1);
    }

    #[test]
    fn flips_weak_margin_linear_model() {
        let model = LinearOracle::new(vec![vec![2.0, 0.0], vec![0.0, 2.0]], vec![0.1, 0.0]);
        let x = Tensor::new(vec![2], vec![0.55, 0.45]).unwrap();
        let cfg = ZooConfig {
            max_iter: 200,
            bs_steps: 3,
            coords_per_step: 2,
            lr: 0.3,
            initial_c: 1.0,
            ..ZooConfig::default()
        };
        let r = zoo(&model, &x, 0, &cfg).unwrap();
        assert!(r.success, "zoo should cross a 0.15 margin");
        assert!(r.queries > 0);
    }
}
