//! Jacobian-based Saliency Map Attack: perturb the most salient features one
//! at a time until the prediction flips or the feature budget is spent.

use super::common::AdversarialResult;
use super::config::JsmaConfig;
use crate::error::{Error, Result};
use crate::oracle::GradientOracle;
use crate::tensor::Tensor;

/// The saliency of one feature given the target-class gradient component and
/// the summed other-class gradient component:
/// zero when `target_grad < 0` or `others_grad > 0`, else
/// `target_grad * |others_grad|`.
pub fn saliency(target_grad: f32, others_grad: f32) -> f32 {
    if target_grad < 0.0 || others_grad > 0.0 {
        0.0
    } else {
        target_grad * others_grad.abs()
    }
}

pub fn jsma<G: GradientOracle>(
    g: &G,
    x: &Tensor,
    y: usize,
    cfg: &JsmaConfig,
) -> Result<AdversarialResult> {
    if !(cfg.theta > 0.0) {
        return Err(Error::invalid_argument("jsma theta must be > 0"));
    }
    if !(cfg.gamma > 0.0 && cfg.gamma <= 1.0) {
        return Err(Error::invalid_argument("jsma gamma must be in (0, 1]"));
    }
    let n = x.numel();
    let budget = ((cfg.gamma as f64) * n as f64).floor().max(1.0) as usize;
    let classes = g.num_classes();

    let logits = g.logits(x)?;
    if logits.argmax() != y {
        return AdversarialResult::new(x.clone(), x.clone(), y, logits.argmax(), 1, 0);
    }
    // Non-targeted: steer toward the runner-up class.
    let target = runner_up(&logits, y);

    let mut adv = x.clone();
    let mut touched = vec![false; n];
    let mut touched_count = 0usize;
    let mut iterations = 0usize;

    loop {
        let logits = g.logits(&adv)?;
        if logits.argmax() != y {
            break;
        }
        // Two backward passes give the full saliency map: d Z_target / dx and
        // d (sum of other logits) / dx.
        let mut seed_t = vec![0.0f32; classes];
        seed_t[target] = 1.0;
        let grad_target = g.grad_logits(&adv, &seed_t)?;
        let mut seed_o = vec![1.0f32; classes];
        seed_o[target] = 0.0;
        let grad_others = g.grad_logits(&adv, &seed_o)?;

        let mut best: Option<(usize, f32)> = None;
        for i in 0..n {
            // A feature may be stepped repeatedly until saturation; the
            // budget counts distinct features. New features are off-limits
            // once the budget is spent.
            if adv.data()[i] >= 1.0 || (!touched[i] && touched_count >= budget) {
                continue;
            }
            let s = saliency(grad_target.data()[i], grad_others.data()[i]);
            if s > 0.0 && best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        let Some((i, _)) = best else {
            break; // saliency map exhausted
        };
        let mut data = adv.data().to_vec();
        data[i] = (data[i] + cfg.theta).min(1.0);
        adv = Tensor::new(adv.shape().to_vec(), data)?;
        if !touched[i] {
            touched[i] = true;
            touched_count += 1;
        }
        iterations += 1;
    }

    let predicted = g.logits(&adv)?.argmax();
    AdversarialResult::new(x.clone(), adv, y, predicted, 0, iterations)
}

fn runner_up(logits: &Tensor, y: usize) -> usize {
    let mut best = usize::MAX;
    for (k, &v) in logits.data().iter().enumerate() {
        if k == y {
            continue;
        }
        if best == usize::MAX || v > logits.data()[best] {
            best = k;
        }
    }
    best
}
