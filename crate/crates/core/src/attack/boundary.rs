//! Boundary attack: start from a uniformly random adversarial image and walk
//! along the decision boundary, accepting only steps that stay adversarial
//! and reduce the distance to the original.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::common::{clip01, per_sample_seed, rng_from, AdversarialResult};
use super::config::BoundaryConfig;
use crate::error::{Error, Result};
use crate::oracle::DecisionOracle;
use crate::tensor::Tensor;

pub fn boundary_attack<D: DecisionOracle>(
    d: &D,
    x: &Tensor,
    y: usize,
    cfg: &BoundaryConfig,
) -> Result<AdversarialResult> {
    boundary_attack_traced(d, x, y, cfg).map(|(r, _)| r)
}

/// Same attack, also returning the accepted-distance trace (monotone
/// non-increasing by construction).
pub fn boundary_attack_traced<D: DecisionOracle>(
    d: &D,
    x: &Tensor,
    y: usize,
    cfg: &BoundaryConfig,
) -> Result<(AdversarialResult, Vec<f32>)> {
    if cfg.init_size == 0 {
        return Err(Error::invalid_argument("boundary init_size must be >= 1"));
    }
    let before = d.queries();
    let mut rng = rng_from(per_sample_seed(cfg.seed, 0xb0));

    if d.decide(x)? != y {
        let r = AdversarialResult::new(x.clone(), x.clone(), y, d.decide(x)?, d.queries() - before, 0)?;
        return Ok((r, vec![0.0]));
    }

    // Uniform draws until one is adversarial.
    let mut current = None;
    for _ in 0..cfg.init_size {
        let cand = Tensor::new(
            x.shape().to_vec(),
            (0..x.numel()).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )?;
        if d.decide(&cand)? != y {
            current = Some(cand);
            break;
        }
    }
    let Some(mut current) = current else {
        return Err(Error::InitFailed { draws: cfg.init_size });
    };

    // Pull the start as close as the decision allows along the segment to x.
    for _ in 0..10 {
        let mid = current.zip_map(x, |c, o| 0.5 * (c + o))?;
        if d.decide(&mid)? != y {
            current = mid;
        }
    }

    let mut dist = l2(&current, x);
    let mut trace = vec![dist];
    let mut orth_step = cfg.delta;
    let mut toward_step = 0.1 * cfg.eps;
    let mut orth_hits = 0usize;
    let mut orth_tries = 0usize;
    let mut toward_hits = 0usize;
    let mut toward_tries = 0usize;
    let mut iterations = 0usize;

    for _ in 0..cfg.max_iter {
        iterations += 1;
        // Orthogonal step on the sphere around x.
        let cand_orth = orthogonal_candidate(&current, x, dist, orth_step, &mut rng)?;
        orth_tries += 1;
        if d.decide(&cand_orth)? != y {
            orth_hits += 1;
            // Contraction toward the original.
            let cand = clip01(&x.zip_map(&cand_orth, |o, c| o + (1.0 - toward_step) * (c - o))?);
            toward_tries += 1;
            if d.decide(&cand)? != y {
                let cand_dist = l2(&cand, x);
                if cand_dist < dist {
                    toward_hits += 1;
                    current = cand;
                    dist = cand_dist;
                    trace.push(dist);
                }
            }
        }
        // Step-size adaptation over windows of 20 probes.
        if orth_tries >= 20 {
            let rate = orth_hits as f32 / orth_tries as f32;
            if rate < 0.2 {
                orth_step *= 0.8;
            } else if rate > 0.6 {
                orth_step = (orth_step * 1.2).min(1.0);
            }
            orth_hits = 0;
            orth_tries = 0;
        }
        if toward_tries >= 20 {
            let rate = toward_hits as f32 / toward_tries as f32;
            if rate < 0.2 {
                toward_step *= 0.7;
            } else if rate > 0.6 {
                toward_step = (toward_step * 1.3).min(0.9);
            }
            toward_hits = 0;
            toward_tries = 0;
        }
    }

    let predicted = d.decide(&current)?;
    let result = AdversarialResult::new(
        x.clone(),
        current,
        y,
        predicted,
        d.queries() - before,
        iterations,
    )?;
    Ok((result, trace))
}

fn orthogonal_candidate(
    current: &Tensor,
    x: &Tensor,
    dist: f32,
    orth_step: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let n = x.numel();
    // Gaussian direction via Box-Muller (keeps the dependency surface small).
    let mut eta: Vec<f32> = Vec::with_capacity(n);
    while eta.len() < n {
        let u1: f32 = rng.gen_range(1e-7..1.0);
        let u2: f32 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        eta.push(r * (2.0 * std::f32::consts::PI * u2).cos());
        if eta.len() < n {
            eta.push(r * (2.0 * std::f32::consts::PI * u2).sin());
        }
    }
    // Remove the component along (x - current).
    let dir: Vec<f32> = x
        .data()
        .iter()
        .zip(current.data())
        .map(|(&o, &c)| (o - c) / dist.max(1e-12))
        .collect();
    let dot: f32 = eta.iter().zip(&dir).map(|(&e, &d)| e * d).sum();
    for (e, &di) in eta.iter_mut().zip(&dir) {
        *e -= dot * di;
    }
    let eta_norm = eta.iter().map(|&e| e * e).sum::<f32>().sqrt().max(1e-12);
    let scale = orth_step * dist / eta_norm;
    let cand = Tensor::new(
        current.shape().to_vec(),
        current
            .data()
            .iter()
            .zip(&eta)
            .map(|(&c, &e)| c + scale * e)
            .collect(),
    )?;
    // Re-project onto the sphere of the current distance around x.
    let cand_dist = l2(&cand, x);
    let cand = x.zip_map(&cand, |o, c| o + (c - o) * (dist / cand_dist.max(1e-12)))?;
    Ok(clip01(&cand))
}

fn l2(a: &Tensor, b: &Tensor) -> f32 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt() as f32
}
