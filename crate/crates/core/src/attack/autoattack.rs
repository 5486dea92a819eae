//! AutoAttack ensemble: APGD with cross-entropy loss, APGD with the
//! difference-of-logits-ratio loss, then Square-Linf. Members run
//! sequentially and the first success wins.

use rand::Rng;

use super::common::{per_sample_seed, project_linf, rng_from, AdversarialResult, Norm};
use super::config::{AutoAttackConfig, SquareConfig};
use super::square::square_attack;
use crate::error::{Error, Result};
use crate::oracle::{GradientOracle, ScoreOracle};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApgdLoss {
    CrossEntropy,
    /// Difference-of-logits ratio; falls back to the plain logit margin for
    /// models with fewer than three classes.
    DifferenceOfLogitsRatio,
}

/// Checkpoint schedule of the step-size controller.
fn checkpoints(n_iter: usize) -> Vec<usize> {
    let mut points = vec![0usize];
    let mut p_cur = 0.22f64;
    let mut prev = 0.0f64;
    while (p_cur * n_iter as f64).ceil() as usize <= n_iter {
        points.push((p_cur * n_iter as f64).ceil() as usize);
        let next = p_cur + (p_cur - prev - 0.03).max(0.06);
        prev = p_cur;
        p_cur = next;
    }
    points.dedup();
    points
}

/// Replay of the step-size halving rule on a recorded loss-increase sequence:
/// at each checkpoint the step halves unless the loss increased in at least
/// 75% of the iterations since the previous checkpoint. Returns the step size
/// in effect at every iteration.
pub fn step_halving_trace(increases: &[bool], eta0: f32) -> Vec<f32> {
    let n = increases.len();
    let cps = checkpoints(n);
    let mut eta = eta0;
    let mut trace = Vec::with_capacity(n);
    let mut cp_idx = 1usize;
    let mut window_start = 0usize;
    for (k, _) in increases.iter().enumerate() {
        if cp_idx < cps.len() && k == cps[cp_idx] {
            let window = &increases[window_start..k];
            let successes = window.iter().filter(|&&b| b).count();
            if (successes as f64) < 0.75 * window.len() as f64 {
                eta *= 0.5;
            }
            window_start = k;
            cp_idx += 1;
        }
        trace.push(eta);
    }
    trace
}

fn loss_value<G: GradientOracle>(g: &G, loss: ApgdLoss, x: &Tensor, y: usize) -> Result<f32> {
    match loss {
        ApgdLoss::CrossEntropy => g.loss(x, y),
        ApgdLoss::DifferenceOfLogitsRatio => {
            let z = g.logits(x)?;
            Ok(dlr_value(z.data(), y))
        }
    }
}

fn dlr_value(z: &[f32], y: usize) -> f32 {
    let order = sorted_desc(z);
    let top_other = order.iter().copied().find(|&k| k != y).unwrap();
    let num = z[y] - z[top_other];
    if z.len() < 3 {
        return -num;
    }
    let den = z[order[0]] - z[order[2]] + 1e-12;
    -num / den
}

fn sorted_desc(z: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

fn loss_gradient<G: GradientOracle>(g: &G, loss: ApgdLoss, x: &Tensor, y: usize) -> Result<Tensor> {
    match loss {
        ApgdLoss::CrossEntropy => g.grad_loss(x, y),
        ApgdLoss::DifferenceOfLogitsRatio => {
            let z = g.logits(x)?;
            let zd = z.data();
            let order = sorted_desc(zd);
            let a = order.iter().copied().find(|&k| k != y).unwrap();
            let classes = zd.len();
            let mut seed = vec![0.0f32; classes];
            if classes < 3 {
                seed[y] = -1.0;
                seed[a] = 1.0;
            } else {
                // d of -(z_y - z_a)/(z_p1 - z_p3): quotient rule folded into
                // one logit-combination seed.
                let num = zd[y] - zd[a];
                let den = zd[order[0]] - zd[order[2]] + 1e-12;
                seed[y] -= 1.0 / den;
                seed[a] += 1.0 / den;
                seed[order[0]] += num / (den * den);
                seed[order[2]] -= num / (den * den);
            }
            g.grad_logits(x, &seed)
        }
    }
}

/// Auto-PGD: momentum steps with the adaptive step-size halving rule.
pub fn apgd<G: GradientOracle>(
    g: &G,
    x: &Tensor,
    y: usize,
    loss: ApgdLoss,
    eps: f32,
    n_iter: usize,
    seed: u64,
) -> Result<AdversarialResult> {
    if !(eps > 0.0) {
        return Err(Error::invalid_argument("apgd eps must be > 0"));
    }
    let before = g.gradient_queries();
    let mut rng = rng_from(per_sample_seed(seed, 0xa9d));
    let momentum = 0.75f32;
    let cps = checkpoints(n_iter);

    let mut x_prev = x.clone();
    let mut x_cur = project_linf(&x.map(|v| v + rng.gen_range(-eps..=eps)), x, eps);
    let mut eta = 2.0 * eps;
    let mut f_cur = loss_value(g, loss, &x_cur, y)?;
    let mut best = (f_cur, x_cur.clone());
    let mut best_at_last_cp = f_cur;
    let mut eta_at_last_cp = eta;
    let mut increases = 0usize;
    let mut window_start = 0usize;
    let mut cp_idx = 1usize;
    let mut iterations = 0usize;

    for k in 0..n_iter {
        iterations = k + 1;
        let grad = loss_gradient(g, loss, &x_cur, y)?;
        let z = project_linf(&x_cur.zip_map(&grad, |c, gi| c + eta * sign(gi))?, x, eps);
        let stepped = x_cur.zip_map(&z, |c, zi| c + momentum * (zi - c))?;
        let drift = x_cur.zip_map(&x_prev, |c, p| (1.0 - momentum) * (c - p))?;
        let next = project_linf(&stepped.zip_map(&drift, |a, b| a + b)?, x, eps);

        let f_next = loss_value(g, loss, &next, y)?;
        if f_next > f_cur {
            increases += 1;
        }
        x_prev = x_cur;
        x_cur = next;
        f_cur = f_next;
        if f_cur > best.0 {
            best = (f_cur, x_cur.clone());
        }
        // Early exit once misclassified.
        if g.logits(&x_cur)?.argmax() != y {
            best = (f_cur, x_cur.clone());
            break;
        }

        if cp_idx < cps.len() && k + 1 == cps[cp_idx] {
            let window_len = k + 1 - window_start;
            let condition_progress = (increases as f64) < 0.75 * window_len as f64;
            let condition_stall =
                (eta - eta_at_last_cp).abs() < f32::EPSILON && best.0 <= best_at_last_cp;
            if condition_progress || condition_stall {
                eta *= 0.5;
                x_cur = best.1.clone();
                f_cur = best.0;
            }
            eta_at_last_cp = eta;
            best_at_last_cp = best.0;
            increases = 0;
            window_start = k + 1;
            cp_idx += 1;
        }
    }

    let adv = best.1;
    let predicted = g.logits(&adv)?.argmax();
    AdversarialResult::new(x.clone(), adv, y, predicted, g.gradient_queries() - before, iterations)
}

/// Sequential ensemble; per sample the first member success wins.
pub fn autoattack<G, S>(
    g: &G,
    score: &S,
    x: &Tensor,
    y: usize,
    cfg: &AutoAttackConfig,
) -> Result<AdversarialResult>
where
    G: GradientOracle,
    S: ScoreOracle,
{
    let ce = apgd(g, x, y, ApgdLoss::CrossEntropy, cfg.eps, cfg.max_iter, cfg.seed)?;
    if ce.success {
        return Ok(ce);
    }
    let dlr = apgd(
        g,
        x,
        y,
        ApgdLoss::DifferenceOfLogitsRatio,
        cfg.eps,
        cfg.max_iter,
        cfg.seed ^ 0x1,
    )?;
    if dlr.success {
        return Ok(dlr);
    }
    let sq_cfg = SquareConfig {
        eps: cfg.eps,
        max_iter: cfg.square_iter,
        init_fraction: 0.05,
        seed: cfg.seed ^ 0x2,
    };
    let sq = square_attack(score, x, y, Norm::Linf, &sq_cfg)?;
    if sq.success {
        return Ok(sq);
    }
    // No member broke the sample; report the ensemble as failed.
    Ok(AdversarialResult::failed(
        x.clone(),
        y,
        ce.queries + dlr.queries + sq.queries,
        ce.iterations + dlr.iterations + sq.iterations,
    ))
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
