//! Elastic-net attack: iterative shrinkage-thresholding on
//! `c * margin(x') + beta * ||x' - x||_1 + ||x' - x||_2^2`, with the same
//! binary search over c as the C&W family.

use super::common::AdversarialResult;
use super::config::EadConfig;
use crate::error::{Error, Result};
use crate::metrics::{distortion, Norm};
use crate::oracle::GradientOracle;
use crate::tensor::Tensor;

/// Soft-thresholding operator: `sign(v) * max(|v| - lambda, 0)`.
pub fn soft_threshold(v: f32, lambda: f32) -> f32 {
    if v > lambda {
        v - lambda
    } else if v < -lambda {
        v + lambda
    } else {
        0.0
    }
}

pub fn ead<G: GradientOracle>(g: &G, x: &Tensor, y: usize, cfg: &EadConfig) -> Result<AdversarialResult> {
    if cfg.beta < 0.0 {
        return Err(Error::invalid_argument("ead beta must be >= 0"));
    }
    let before = g.gradient_queries();
    let n = x.numel();
    let classes = g.num_classes();
    let mut best: Option<(f32, Tensor, usize)> = None; // keyed by L1 + L2^2
    let mut c = cfg.initial_c;
    let mut c_lo = 0.0f32;
    let mut c_hi = f32::INFINITY;
    let mut iterations = 0usize;

    for _ in 0..cfg.bs_steps.max(1) {
        let mut adv = x.clone();
        let mut succeeded = false;
        for _ in 0..cfg.max_iter {
            iterations += 1;
            let logits = g.logits(&adv)?;
            let mut runner = usize::MAX;
            for (k, &v) in logits.data().iter().enumerate() {
                if k != y && (runner == usize::MAX || v > logits.data()[runner]) {
                    runner = k;
                }
            }
            let margin = logits.data()[y] - logits.data()[runner];
            if margin <= 0.0 {
                succeeded = true;
                record_best(&mut best, x, &adv, cfg.beta, g)?;
            }
            // Gradient of the smooth part: c * d(margin) + 2 * (adv - x).
            let grad_margin = if margin > 0.0 {
                let mut seed = vec![0.0f32; classes];
                seed[y] = 1.0;
                seed[runner] = -1.0;
                Some(g.grad_logits(&adv, &seed)?)
            } else {
                None
            };
            let mut data = vec![0.0f32; n];
            for i in 0..n {
                let mut grad = 2.0 * (adv.data()[i] - x.data()[i]);
                if let Some(gm) = &grad_margin {
                    grad += c * gm.data()[i];
                }
                let z = adv.data()[i] - cfg.lr * grad;
                // ISTA prox step: shrink the perturbation toward x, then box.
                let shrunk = x.data()[i] + soft_threshold(z - x.data()[i], cfg.beta * cfg.lr);
                data[i] = shrunk.clamp(0.0, 1.0);
                if !data[i].is_finite() {
                    return Ok(AdversarialResult::failed(
                        x.clone(),
                        y,
                        g.gradient_queries() - before,
                        iterations,
                    ));
                }
            }
            adv = Tensor::new(adv.shape().to_vec(), data)?;
        }
        let logits = g.logits(&adv)?;
        if logits.argmax() != y {
            succeeded = true;
            record_best(&mut best, x, &adv, cfg.beta, g)?;
        }
        if succeeded {
            c_hi = c;
            c = 0.5 * (c_lo + c_hi);
        } else {
            c_lo = c;
            c = if c_hi.is_finite() { 0.5 * (c_lo + c_hi) } else { c * 10.0 };
        }
    }

    let queries = g.gradient_queries() - before;
    match best {
        Some((_, adv, pred)) => AdversarialResult::new(x.clone(), adv, y, pred, queries, iterations),
        None => Ok(AdversarialResult::failed(x.clone(), y, queries, iterations)),
    }
}

fn record_best<G: GradientOracle>(
    best: &mut Option<(f32, Tensor, usize)>,
    x: &Tensor,
    adv: &Tensor,
    beta: f32,
    g: &G,
) -> Result<()> {
    let l1 = distortion(x, adv, Norm::L1)?;
    let l2 = distortion(x, adv, Norm::L2)?;
    let score = beta * l1 + l2 * l2;
    if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
        let pred = g.logits(adv)?.argmax();
        *best = Some((score, adv.clone(), pred));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::LinearOracle;

    #[test]
    fn soft_threshold_arithmetic() {
        assert!((soft_threshold(0.5, 0.2) - 0.3).abs() < 1e-7);
        assert!((soft_threshold(-0.5, 0.2) + 0.3).abs() < 1e-7);
        assert_eq!(soft_threshold(0.1, 0.2), 0.0);
    }

    #[test]
    fn beta_zero_reduces_to_cw_l2_objective() {
        // With beta = 0 the prox step is the identity, so EAD is plain
        // gradient descent on the C&W-L2 objective; both should find an
        // adversarial example of comparable L2 on a linear model.
        let model = LinearOracle::new(vec![vec![0.0, 0.0], vec![2.0, 1.0]], vec![0.0, -1.2]);
        let x = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        let cfg = EadConfig { beta: 0.0, max_iter: 60, bs_steps: 6, lr: 0.2, ..EadConfig::default() };
        let r = ead(&model, &x, 1, &cfg).unwrap();
        assert!(r.success);
        assert!(r.distortions.l2 < 0.4, "l2 {}", r.distortions.l2);
    }

    #[test]
    fn reports_l1_and_l2() {
        let model = LinearOracle::new(vec![vec![0.0, 0.0], vec![2.0, 1.0]], vec![0.0, -1.2]);
        let x = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        let cfg = EadConfig { max_iter: 60, bs_steps: 6, lr: 0.2, ..EadConfig::default() };
        let r = ead(&model, &x, 1, &cfg).unwrap();
        assert!(r.success);
        assert!(r.distortions.l1 >= r.distortions.l2);
    }
}
