//! Projected Gradient Descent with random restarts: signed-gradient steps
//! projected onto the eps L-infinity ball around the input, keeping the
//! highest-loss iterate across restarts.

use rand::Rng;

use super::common::{per_sample_seed, project_linf, rng_from, AdversarialResult};
use super::config::PgdConfig;
use crate::error::{Error, Result};
use crate::oracle::GradientOracle;
use crate::tensor::Tensor;

pub fn pgd<G: GradientOracle>(
    g: &G,
    x: &Tensor,
    y: usize,
    cfg: &PgdConfig,
) -> Result<AdversarialResult> {
    if cfg.step > cfg.eps {
        return Err(Error::invalid_argument(format!(
            "pgd step {} exceeds eps {}",
            cfg.step, cfg.eps
        )));
    }
    let before = g.gradient_queries();
    let mut rng = rng_from(per_sample_seed(cfg.seed, 0x9d9));
    let mut best: Option<(f32, Tensor)> = None;
    let mut iterations = 0usize;

    for _restart in 0..cfg.restarts.max(1) {
        // Uniform init noise inside the ball.
        let mut current = project_linf(
            &x.map(|v| v + rng.gen_range(-cfg.eps..=cfg.eps)),
            x,
            cfg.eps,
        );
        for _ in 0..cfg.max_iter {
            iterations += 1;
            let grad = g.grad_loss(&current, y)?;
            current = project_linf(
                &current.zip_map(&grad, |c, gi| c + cfg.step * sign(gi))?,
                x,
                cfg.eps,
            );
            let loss = g.loss(&current, y)?;
            if best.as_ref().is_none_or(|(b, _)| loss > *b) {
                best = Some((loss, current.clone()));
            }
        }
    }

    let adv = best.map(|(_, t)| t).unwrap_or_else(|| x.clone());
    let predicted = g.logits(&adv)?.argmax();
    AdversarialResult::new(x.clone(), adv, y, predicted, g.gradient_queries() - before, iterations)
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
