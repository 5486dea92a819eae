//! Carlini & Wagner attacks: L2 via the tanh box reparameterization with a
//! binary search over the loss weight, and the penalized iterated variant
//! for L-infinity with a shrinking per-coordinate threshold.

use super::common::{AdversarialResult, Norm};
use super::config::CwConfig;
use crate::error::Result;
use crate::metrics::distortion;
use crate::oracle::GradientOracle;
use crate::tensor::Tensor;

pub fn cw<G: GradientOracle>(
    g: &G,
    x: &Tensor,
    y: usize,
    norm: Norm,
    cfg: &CwConfig,
) -> Result<AdversarialResult> {
    match norm {
        Norm::L2 => cw_l2(g, x, y, cfg),
        Norm::Linf => cw_linf(g, x, y, cfg),
        other => Err(crate::error::Error::invalid_argument(format!(
            "cw supports L2 and Linf, got {other:?}"
        ))),
    }
}

/// Margin loss `max(Z_y - max_{k != y} Z_k, 0)` and its gradient seed; zero
/// loss means the sample is adversarial.
fn margin_and_runner<G: GradientOracle>(g: &G, x: &Tensor, y: usize) -> Result<(f32, usize)> {
    let logits = g.logits(x)?;
    let mut runner = usize::MAX;
    for (k, &v) in logits.data().iter().enumerate() {
        if k != y && (runner == usize::MAX || v > logits.data()[runner]) {
            runner = k;
        }
    }
    Ok(((logits.data()[y] - logits.data()[runner]).max(0.0), runner))
}

fn cw_l2<G: GradientOracle>(g: &G, x: &Tensor, y: usize, cfg: &CwConfig) -> Result<AdversarialResult> {
    let before = g.gradient_queries();
    let n = x.numel();
    let classes = g.num_classes();
    // sigma = atanh(2x - 1) so that 0.5*(tanh(sigma)+1) starts at x.
    // atanh(2c - 1) = 0.5 * ln(c / (1 - c))
    let sigma0: Vec<f32> = x
        .data()
        .iter()
        .map(|&v| {
            let c = v.clamp(1e-6, 1.0 - 1e-6);
            0.5 * (c / (1.0 - c)).ln()
        })
        .collect();

    let mut best: Option<(f32, Tensor, usize)> = None; // (l2, adv, predicted)
    let mut c = cfg.initial_c;
    let mut c_lo = 0.0f32;
    let mut c_hi = f32::INFINITY;

    for _ in 0..cfg.bs_steps.max(1) {
        let mut sigma = sigma0.clone();
        let mut succeeded = false;
        for _ in 0..cfg.max_iter {
            let adv = tanh_image(&sigma, x.shape());
            let (margin, runner) = margin_and_runner(g, &adv, y)?;
            if margin <= 0.0 {
                succeeded = true;
                let l2 = distortion(x, &adv, Norm::L2)?;
                let pred = g.logits(&adv)?.argmax();
                if best.as_ref().is_none_or(|(b, _, _)| l2 < *b) {
                    best = Some((l2, adv.clone(), pred));
                }
            }
            // Gradient of ||adv - x||^2 + c * margin w.r.t. sigma.
            let grad_margin = if margin > 0.0 {
                let mut seed = vec![0.0f32; classes];
                seed[y] = 1.0;
                seed[runner] = -1.0;
                Some(g.grad_logits(&adv, &seed)?)
            } else {
                None
            };
            let mut any_nonfinite = false;
            for i in 0..n {
                let t = sigma[i].tanh();
                let dx_dsigma = 0.5 * (1.0 - t * t);
                let mut grad = 2.0 * (adv.data()[i] - x.data()[i]);
                if let Some(gm) = &grad_margin {
                    grad += c * gm.data()[i];
                }
                sigma[i] -= cfg.lr_l2 * grad * dx_dsigma;
                if !sigma[i].is_finite() {
                    any_nonfinite = true;
                }
            }
            if any_nonfinite {
                // Optimizer diverged: report a failed record, never crash.
                return Ok(AdversarialResult::failed(
                    x.clone(),
                    y,
                    g.gradient_queries() - before,
                    cfg.max_iter,
                ));
            }
        }
        // Final iterate of this c.
        let adv = tanh_image(&sigma, x.shape());
        let (margin, _) = margin_and_runner(g, &adv, y)?;
        if margin <= 0.0 {
            succeeded = true;
            let l2 = distortion(x, &adv, Norm::L2)?;
            let pred = g.logits(&adv)?.argmax();
            if best.as_ref().is_none_or(|(b, _, _)| l2 < *b) {
                best = Some((l2, adv, pred));
            }
        }
        // Binary search on c: lighter c after success, heavier after failure.
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
        Some((_, adv, pred)) => {
            AdversarialResult::new(x.clone(), adv, y, pred, queries, cfg.max_iter * cfg.bs_steps)
        }
        None => Ok(AdversarialResult::failed(x.clone(), y, queries, cfg.max_iter * cfg.bs_steps)),
    }
}

fn tanh_image(sigma: &[f32], shape: &[usize]) -> Tensor {
    Tensor::new(
        shape.to_vec(),
        sigma.iter().map(|&s| 0.5 * (s.tanh() + 1.0)).collect(),
    )
    .expect("shape matches")
}

fn cw_linf<G: GradientOracle>(g: &G, x: &Tensor, y: usize, cfg: &CwConfig) -> Result<AdversarialResult> {
    let before = g.gradient_queries();
    let n = x.numel();
    let classes = g.num_classes();
    let mut delta = vec![0.0f32; n];
    let mut tau = 1.0f32;
    let mut best: Option<(f32, Tensor, usize)> = None;
    let c = cfg.initial_c.max(1.0); // the penalty variant needs real loss weight
    let mut iterations = 0usize;

    for _stage in 0..cfg.bs_steps.max(1) {
        for _ in 0..cfg.max_iter {
            iterations += 1;
            let adv = apply_delta(x, &delta);
            let (margin, runner) = margin_and_runner(g, &adv, y)?;
            if margin <= 0.0 {
                let linf = distortion(x, &adv, Norm::Linf)?;
                let pred = g.logits(&adv)?.argmax();
                if best.as_ref().is_none_or(|(b, _, _)| linf < *b) {
                    best = Some((linf, adv.clone(), pred));
                }
            }
            let grad_margin = if margin > 0.0 {
                let mut seed = vec![0.0f32; classes];
                seed[y] = 1.0;
                seed[runner] = -1.0;
                Some(g.grad_logits(&adv, &seed)?)
            } else {
                None
            };
            for i in 0..n {
                let mut grad = if delta[i].abs() > tau { delta[i].signum() } else { 0.0 };
                if let Some(gm) = &grad_margin {
                    grad += c * gm.data()[i];
                }
                delta[i] -= cfg.lr * grad;
                // Keep x + delta inside the pixel box.
                delta[i] = delta[i].clamp(-x.data()[i], 1.0 - x.data()[i]);
                if !delta[i].is_finite() {
                    return Ok(AdversarialResult::failed(
                        x.clone(),
                        y,
                        g.gradient_queries() - before,
                        iterations,
                    ));
                }
            }
        }
        // Shrink the threshold once every coordinate fits under it.
        if delta.iter().all(|d| d.abs() < tau) {
            tau *= 0.9;
        }
    }

    let queries = g.gradient_queries() - before;
    match best {
        Some((_, adv, pred)) => AdversarialResult::new(x.clone(), adv, y, pred, queries, iterations),
        None => Ok(AdversarialResult::failed(x.clone(), y, queries, iterations)),
    }
}

fn apply_delta(x: &Tensor, delta: &[f32]) -> Tensor {
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(delta).map(|(&a, &d)| (a + d).clamp(0.0, 1.0)).collect(),
    )
    .expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::LinearOracle;

    #[test]
    fn tanh_reparam_stays_in_box() {
        for s in [-50.0f32, -1.0, 0.0, 1.0, 50.0] {
            let img = tanh_image(&[s], &[1]);
            assert!((0.0..=1.0).contains(&img.data()[0]));
        }
        // sigma = 0 maps to 0.5 regardless of the original pixel.
        assert_eq!(tanh_image(&[0.0], &[1]).data()[0], 0.5);
    }

    #[test]
    fn l2_finds_closer_examples_than_fgsm_scale() {
        let model = LinearOracle::new(vec![vec![0.0, 0.0], vec![2.0, 1.0]], vec![0.0, -1.2]);
        let x = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        // Gap = 2*0.5 + 0.5 - 1.2 = 0.3 > 0: class 1 correct.
        let cfg = CwConfig { max_iter: 60, bs_steps: 6, lr_l2: 0.2, ..CwConfig::default() };
        let r = cw(&model, &x, 1, Norm::L2, &cfg).unwrap();
        assert!(r.success, "cw-l2 should cross a 0.13-distance boundary");
        // Analytic minimal distance = 0.3 / sqrt(5) = 0.134.
        assert!(r.distortions.l2 < 0.35, "l2 {}", r.distortions.l2);
    }

    #[test]
    fn linf_flips_and_spreads_perturbation() {
        let model = LinearOracle::new(vec![vec![0.0, 0.0], vec![2.0, 1.0]], vec![0.0, -1.2]);
        let x = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        let cfg = CwConfig { max_iter: 80, bs_steps: 5, lr: 0.02, ..CwConfig::default() };
        let r = cw(&model, &x, 1, Norm::Linf, &cfg).unwrap();
        assert!(r.success);
        assert!(r.distortions.linf < 0.3, "linf {}", r.distortions.linf);
    }
}
