//! Attack configurations. Field defaults follow the reference evaluation's
//! published settings; everything is overridable per run.

use serde::{Deserialize, Serialize};

fn default_seed() -> u64 {
    0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FgsmConfig {
    pub eps: f32,
    pub seed: u64,
}

impl Default for FgsmConfig {
    fn default() -> Self {
        FgsmConfig { eps: 0.008, seed: default_seed() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DeepFoolConfig {
    pub max_iter: usize,
    pub overshoot: f32,
}

impl Default for DeepFoolConfig {
    fn default() -> Self {
        DeepFoolConfig { max_iter: 100, overshoot: 0.008 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct JsmaConfig {
    /// Per-step feature perturbation.
    pub theta: f32,
    /// Fraction of features allowed to change.
    pub gamma: f32,
}

impl Default for JsmaConfig {
    fn default() -> Self {
        JsmaConfig { theta: 0.08, gamma: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CwConfig {
    pub max_iter: usize,
    /// Binary-search steps over the loss weight c (L2 mode); threshold-shrink
    /// stages (L-inf mode).
    pub bs_steps: usize,
    pub initial_c: f32,
    /// Gradient-descent step size for the L-inf variant.
    pub lr: f32,
    /// Step size of the L2 variant's descent on sigma.
    pub lr_l2: f32,
    pub seed: u64,
}

impl Default for CwConfig {
    fn default() -> Self {
        CwConfig {
            max_iter: 10,
            bs_steps: 10,
            initial_c: 0.01,
            lr: 0.01,
            lr_l2: 0.1,
            seed: default_seed(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PgdConfig {
    pub eps: f32,
    pub step: f32,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig { eps: 0.0008, step: 0.00008, max_iter: 10, restarts: 20, seed: default_seed() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EadConfig {
    pub max_iter: usize,
    pub bs_steps: usize,
    pub initial_c: f32,
    /// Weight of the L1 term in the elastic-net objective.
    pub beta: f32,
    pub lr: f32,
}

impl Default for EadConfig {
    fn default() -> Self {
        EadConfig { max_iter: 10, bs_steps: 10, initial_c: 0.01, beta: 0.001, lr: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoAttackConfig {
    pub eps: f32,
    /// Iterations per APGD member.
    pub max_iter: usize,
    /// Iterations for the Square member.
    pub square_iter: usize,
    pub seed: u64,
}

impl Default for AutoAttackConfig {
    fn default() -> Self {
        AutoAttackConfig { eps: 0.004, max_iter: 100, square_iter: 1000, seed: default_seed() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ZooConfig {
    pub max_iter: usize,
    pub bs_steps: usize,
    pub initial_c: f32,
    /// Finite-difference probe step; the source calls it only "a small
    /// constant" — 1e-4 balances truncation against f32 cancellation.
    pub h: f32,
    /// Coordinates probed per iteration.
    pub coords_per_step: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ZooConfig {
    fn default() -> Self {
        ZooConfig {
            max_iter: 10,
            bs_steps: 5,
            initial_c: 0.01,
            h: 1e-4,
            coords_per_step: 32,
            lr: 0.2,
            seed: default_seed(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SquareConfig {
    pub eps: f32,
    pub max_iter: usize,
    /// Initial fraction of pixels covered by the square.
    pub init_fraction: f32,
    pub seed: u64,
}

impl Default for SquareConfig {
    fn default() -> Self {
        SquareConfig { eps: 0.015, max_iter: 1000, init_fraction: 0.05, seed: default_seed() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundaryConfig {
    /// Initial step size toward the original.
    pub eps: f32,
    /// Initial orthogonal step size.
    pub delta: f32,
    /// Uniform draws allowed when searching for an adversarial start.
    pub init_size: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig { eps: 1.0, delta: 0.1, init_size: 100, max_iter: 500, seed: default_seed() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GeodaConfig {
    /// Bisection tolerance along the search segment.
    pub bs_tol: f32,
    /// Dimension of the low-frequency DCT subspace for normal estimation.
    pub dct_dim: usize,
    /// Probes used to estimate the boundary normal.
    pub probes: usize,
    /// Uniform draws allowed when searching for an adversarial start.
    pub init_size: usize,
    pub seed: u64,
}

impl Default for GeodaConfig {
    fn default() -> Self {
        GeodaConfig { bs_tol: 0.0001, dct_dim: 75, probes: 200, init_size: 100, seed: default_seed() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_defaults() {
        let df = DeepFoolConfig::default();
        assert_eq!((df.max_iter, df.overshoot), (100, 0.008));
        let jsma = JsmaConfig::default();
        assert_eq!((jsma.theta, jsma.gamma), (0.08, 1.0));
        let cw = CwConfig::default();
        assert_eq!((cw.max_iter, cw.bs_steps, cw.initial_c, cw.lr), (10, 10, 0.01, 0.01));
        let pgd = PgdConfig::default();
        assert_eq!(pgd.restarts, 20);
        let sq = SquareConfig::default();
        assert_eq!((sq.eps, sq.max_iter, sq.init_fraction), (0.015, 1000, 0.05));
        let ba = BoundaryConfig::default();
        assert_eq!((ba.eps, ba.delta, ba.max_iter), (1.0, 0.1, 500));
        let geoda = GeodaConfig::default();
        assert_eq!((geoda.bs_tol, geoda.dct_dim), (0.0001, 75));
        let aa = AutoAttackConfig::default();
        assert_eq!(aa.eps, 0.004);
        assert_eq!(FgsmConfig::default().eps, 0.008);
    }
}
