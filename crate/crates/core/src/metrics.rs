//! Distortion norms, adversarial accuracy, and the three quantization
//! diagnostics: gradient zero-density, gradient cosine similarity, and
//! DeepFool boundary distance.

use serde::{Deserialize, Serialize};

use crate::attack::{AdversarialResult, DeepFoolConfig};
use crate::error::{Error, Result};
use crate::model::Classify;
use crate::oracle::GradientOracle;
use crate::tensor::{finite_difference_gradient, Tensor};

/// Coordinates with |finite-difference estimate| at or below this count as
/// zero: below any real f32-scale signal, above central-difference rounding
/// noise.
pub const ZERO_GRADIENT_TOL: f64 = 1e-12;

/// Threshold for counting a coordinate as changed under L0.
pub const L0_TOL: f32 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    L0,
    L1,
    L2,
    Linf,
}

/// Distortion of `adv` relative to `orig` under one norm.
pub fn distortion(orig: &Tensor, adv: &Tensor, norm: Norm) -> Result<f32> {
    if orig.shape() != adv.shape() {
        return Err(Error::shape_mismatch(format!(
            "distortion on {:?} vs {:?}",
            orig.shape(),
            adv.shape()
        )));
    }
    let deltas = orig.data().iter().zip(adv.data()).map(|(&a, &b)| b - a);
    Ok(match norm {
        Norm::L0 => deltas.filter(|d| d.abs() > L0_TOL).count() as f32,
        Norm::L1 => deltas.map(|d| d.abs() as f64).sum::<f64>() as f32,
        Norm::L2 => (deltas.map(|d| (d as f64) * (d as f64)).sum::<f64>()).sqrt() as f32,
        Norm::Linf => deltas.map(f32::abs).fold(0.0, f32::max),
    })
}

/// All four norms of one perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distortions {
    pub l0: f32,
    pub l1: f32,
    pub l2: f32,
    pub linf: f32,
}

impl Distortions {
    pub fn zero() -> Self {
        Distortions { l0: 0.0, l1: 0.0, l2: 0.0, linf: 0.0 }
    }

    pub fn measure(orig: &Tensor, adv: &Tensor) -> Result<Self> {
        Ok(Distortions {
            l0: distortion(orig, adv, Norm::L0)?,
            l1: distortion(orig, adv, Norm::L1)?,
            l2: distortion(orig, adv, Norm::L2)?,
            linf: distortion(orig, adv, Norm::Linf)?,
        })
    }

    pub fn get(&self, norm: Norm) -> f32 {
        match norm {
            Norm::L0 => self.l0,
            Norm::L1 => self.l1,
            Norm::L2 => self.l2,
            Norm::Linf => self.linf,
        }
    }
}

/// Per-norm means over all attacked samples and over successful ones only.
/// The source tables do not say which population they average, so both are
/// reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionStats {
    pub mean_all: Distortions,
    pub mean_success: Distortions,
    pub n_all: usize,
    pub n_success: usize,
}

impl DistortionStats {
    pub fn from_results(results: &[AdversarialResult]) -> Self {
        let mut sum_all = [0.0f64; 4];
        let mut sum_success = [0.0f64; 4];
        let mut n_success = 0usize;
        for r in results {
            let d = [r.distortions.l0, r.distortions.l1, r.distortions.l2, r.distortions.linf];
            for (acc, v) in sum_all.iter_mut().zip(d) {
                *acc += v as f64;
            }
            if r.success {
                n_success += 1;
                for (acc, v) in sum_success.iter_mut().zip(d) {
                    *acc += v as f64;
                }
            }
        }
        let mean = |sums: [f64; 4], n: usize| {
            if n == 0 {
                Distortions::zero()
            } else {
                Distortions {
                    l0: (sums[0] / n as f64) as f32,
                    l1: (sums[1] / n as f64) as f32,
                    l2: (sums[2] / n as f64) as f32,
                    linf: (sums[3] / n as f64) as f32,
                }
            }
        };
        DistortionStats {
            mean_all: mean(sum_all, results.len()),
            mean_success: mean(sum_success, n_success),
            n_all: results.len(),
            n_success,
        }
    }
}

/// Fraction of stored adversarial tensors the oracle still classifies as the
/// original label.
pub fn adversarial_accuracy<C: Classify + Sync>(
    oracle: &C,
    results: &[AdversarialResult],
) -> Result<f32> {
    if results.is_empty() {
        return Err(Error::invalid_argument("no adversarial results"));
    }
    let correct: Vec<bool> = crate::par::map_indexed(results.len(), |i| {
        oracle.classify(&results[i].adversarial) == results[i].original_label
    });
    Ok(correct.iter().filter(|&&c| c).count() as f32 / results.len() as f32)
}

/// Mean fraction of finite-difference gradient coordinates that are
/// numerically zero — the gradient-masking diagnostic.
pub fn gradient_zero_density<F>(f: F, samples: &[Tensor], h: f32) -> Result<f64>
where
    F: Fn(&Tensor) -> f32 + Sync,
{
    if samples.is_empty() {
        return Err(Error::invalid_argument("no samples for zero-density"));
    }
    let per_sample: Vec<Result<f64>> = crate::par::map_indexed(samples.len(), |i| {
        let grad = finite_difference_gradient(|t| f(t), &samples[i], h)?;
        let zeros = grad
            .data()
            .iter()
            .filter(|v| (v.abs() as f64) <= ZERO_GRADIENT_TOL)
            .count();
        Ok(zeros as f64 / grad.numel() as f64)
    });
    let mut total = 0.0;
    for r in per_sample {
        total += r?;
    }
    Ok(total / samples.len() as f64)
}

/// Outcome of the gradient-alignment diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSimilarity {
    pub mean: f64,
    /// Samples that contributed to the mean.
    pub used: usize,
    /// Samples excluded because either gradient was numerically zero.
    pub skipped_zero: usize,
}

/// Mean cosine between loss gradients of two models over labeled samples.
pub fn gradient_cosine_similarity<A, B>(
    g_float: &A,
    g_other: &B,
    samples: &[Tensor],
    labels: &[usize],
) -> Result<CosineSimilarity>
where
    A: GradientOracle,
    B: GradientOracle,
{
    if samples.is_empty() || samples.len() != labels.len() {
        return Err(Error::invalid_argument("samples/labels mismatch or empty"));
    }
    let mut total = 0.0f64;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for (x, &y) in samples.iter().zip(labels) {
        let ga = g_float.grad_loss(x, y)?;
        let gb = g_other.grad_loss(x, y)?;
        let na = ga.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let nb = gb.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if na <= ZERO_GRADIENT_TOL || nb <= ZERO_GRADIENT_TOL {
            skipped += 1;
            continue;
        }
        let dot: f64 = ga
            .data()
            .iter()
            .zip(gb.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        total += dot / (na * nb);
        used += 1;
    }
    if used == 0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok(CosineSimilarity { mean: total / used as f64, used, skipped_zero: skipped })
}

/// Mean DeepFool L2 over correctly-classified samples; initially
/// misclassified samples are skipped and counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDistance {
    pub mean_l2: Option<f64>,
    pub measured: usize,
    pub skipped_misclassified: usize,
}

pub fn boundary_distance<G: GradientOracle>(
    g: &G,
    samples: &[Tensor],
    labels: &[usize],
    cfg: &DeepFoolConfig,
) -> Result<BoundaryDistance> {
    if samples.len() != labels.len() {
        return Err(Error::invalid_argument("samples/labels mismatch"));
    }
    let mut total = 0.0f64;
    let mut measured = 0usize;
    let mut skipped = 0usize;
    for (x, &y) in samples.iter().zip(labels) {
        if g.logits(x)?.argmax() != y {
            skipped += 1;
            continue;
        }
        let r = crate::attack::deepfool(g, x, y, cfg)?;
        total += r.distortions.l2 as f64;
        measured += 1;
    }
    Ok(BoundaryDistance {
        mean_l2: if measured > 0 { Some(total / measured as f64) } else { None },
        measured,
        skipped_misclassified: skipped,
    })
}
