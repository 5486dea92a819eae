//! Fast Gradient Sign Method: one signed-gradient step of size eps.

use super::common::{clip01, AdversarialResult};
use crate::error::{Error, Result};
use crate::oracle::GradientOracle;
use crate::tensor::Tensor;

pub fn fgsm<G: GradientOracle>(g: &G, x: &Tensor, y: usize, eps: f32) -> Result<AdversarialResult> {
    if !(eps >= 0.0) {
        return Err(Error::invalid_argument(format!("fgsm eps must be >= 0, got {eps}")));
    }
    let grad = g.grad_loss(x, y)?;
    if !grad.is_finite() {
        return Err(Error::GradientDegenerate("fgsm: non-finite loss gradient".into()));
    }
    let adv = clip01(&x.zip_map(&grad, |xi, gi| xi + eps * sign(gi))?);
    let predicted = g.logits(&adv)?.argmax();
    AdversarialResult::new(x.clone(), adv, y, predicted, 1, 1)
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
