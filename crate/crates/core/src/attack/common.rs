//! Shared attack plumbing: the result record, pixel-box helpers, and
//! per-sample seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::metrics::Norm;

use crate::error::Result;
use crate::metrics::Distortions;
use crate::tensor::Tensor;

/// Outcome of one attack on one sample.
///
/// `success` holds exactly when the stored adversarial tensor is classified
/// differently from the original label (non-targeted semantics), and the
/// adversarial tensor always lies in the `[0, 1]` pixel box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdversarialResult {
    pub original: Tensor,
    pub adversarial: Tensor,
    pub original_label: usize,
    pub predicted_label: usize,
    pub success: bool,
    pub queries: u64,
    pub iterations: usize,
    pub distortions: Distortions,
}

impl AdversarialResult {
    pub fn new(
        original: Tensor,
        adversarial: Tensor,
        original_label: usize,
        predicted_label: usize,
        queries: u64,
        iterations: usize,
    ) -> Result<Self> {
        let adversarial = adversarial.clamped(0.0, 1.0);
        let distortions = Distortions::measure(&original, &adversarial)?;
        Ok(AdversarialResult {
            original,
            adversarial,
            original_label,
            predicted_label,
            success: predicted_label != original_label,
            queries,
            iterations,
            distortions,
        })
    }

    /// Failed attack: the clean sample stands, counted as unbroken.
    pub fn failed(original: Tensor, original_label: usize, queries: u64, iterations: usize) -> Self {
        let distortions = Distortions::zero();
        AdversarialResult {
            adversarial: original.clone(),
            original,
            original_label,
            predicted_label: original_label,
            success: false,
            queries,
            iterations,
            distortions,
        }
    }
}

/// Clamp every pixel into the unit box.
pub fn clip01(t: &Tensor) -> Tensor {
    t.clamped(0.0, 1.0)
}

/// Project `adv` onto the L-infinity ball of radius `eps` around `x`,
/// intersected with the unit box.
pub fn project_linf(adv: &Tensor, x: &Tensor, eps: f32) -> Tensor {
    adv.zip_map(x, |a, o| a.clamp(o - eps, o + eps).clamp(0.0, 1.0))
        .expect("same shape")
}

/// Derive an independent per-sample seed so batch parallelism cannot change
/// attack outcomes (splitmix64 finalizer over seed and index).
pub fn per_sample_seed(config_seed: u64, sample_index: usize) -> u64 {
    let mut z = config_seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((sample_index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn result_recomputes_distortions_exactly() {
        let orig = Tensor::new(vec![3], vec![0.1, 0.5, 0.9]).unwrap();
        let adv = Tensor::new(vec![3], vec![0.1, 0.7, 0.9]).unwrap();
        let r = AdversarialResult::new(orig.clone(), adv.clone(), 0, 1, 10, 2).unwrap();
        assert!(r.success);
        let again = Distortions::measure(&r.original, &r.adversarial).unwrap();
        assert_eq!(r.distortions, again);
    }

    #[test]
    fn result_clips_adversarial_to_unit_box() {
        let orig = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        let adv = Tensor::new(vec![2], vec![1.2, -0.1]).unwrap();
        let r = AdversarialResult::new(orig, adv, 0, 0, 0, 0).unwrap();
        assert_eq!(r.adversarial.data(), &[1.0, 0.0]);
        assert!(!r.success);
    }

    #[test]
    fn per_sample_seeds_differ() {
        let a = per_sample_seed(7, 0);
        let b = per_sample_seed(7, 1);
        let c = per_sample_seed(8, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, per_sample_seed(7, 0));
    }
}
