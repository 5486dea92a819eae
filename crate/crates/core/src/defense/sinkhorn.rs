//! Debiased Sinkhorn divergence between weighted point clouds:
//! `S(A,B) = OT_eps(A,B) - 0.5*OT_eps(A,A) - 0.5*OT_eps(B,B)` with the
//! entropic transport cost computed by log-domain Sinkhorn iterations.
//!
//! All internal accumulation is f64: small eps drives the kernel through
//! exp() ranges where f32 cancellation would dominate.

use crate::error::{Error, Result};

/// Weighted point set; weights must sum to 1.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<Vec<f32>>,
    pub weights: Vec<f64>,
}

impl PointCloud {
    /// Uniform weights over the given points.
    pub fn uniform(points: Vec<Vec<f32>>) -> Self {
        let n = points.len().max(1);
        let w = 1.0 / n as f64;
        PointCloud { weights: vec![w; points.len()], points }
    }

    fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid_argument("empty point cloud"));
        }
        if self.points.len() != self.weights.len() {
            return Err(Error::invalid_argument("points/weights length mismatch"));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid_argument(format!(
                "weights must sum to 1, got {sum}"
            )));
        }
        let dim = self.points[0].len();
        if self.points.iter().any(|p| p.len() != dim) {
            return Err(Error::invalid_argument("inconsistent point dimensions"));
        }
        Ok(())
    }
}

/// Squared-Euclidean cost matrix.
fn cost_matrix(a: &PointCloud, b: &PointCloud) -> Result<Vec<Vec<f64>>> {
    let mut c = vec![vec![0.0f64; b.points.len()]; a.points.len()];
    for (i, p) in a.points.iter().enumerate() {
        for (j, q) in b.points.iter().enumerate() {
            let mut acc = 0.0f64;
            for (&x, &y) in p.iter().zip(q) {
                let d = x as f64 - y as f64;
                acc += d * d;
            }
            if !acc.is_finite() {
                return Err(Error::numeric(format!("non-finite cost at ({i}, {j})")));
            }
            c[i][j] = acc;
        }
    }
    Ok(c)
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = terms.collect();
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + vals.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Entropic transport: returns the sharp cost `<P, C>` and the plan.
fn sinkhorn_plan(
    a: &PointCloud,
    b: &PointCloud,
    eps: f64,
    iters: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let c = cost_matrix(a, b)?;
    let (n, m) = (a.points.len(), b.points.len());
    let log_a: Vec<f64> = a.weights.iter().map(|&w| w.max(1e-300).ln()).collect();
    let log_b: Vec<f64> = b.weights.iter().map(|&w| w.max(1e-300).ln()).collect();
    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; m];
    // Jacobi updates (both potentials from the previous iterate): the (A,B)
    // and (B,A) runs then perform mirror-image arithmetic with (f, g)
    // swapped, which is what makes the divergence symmetric to round-off
    // rather than to convergence.
    for _ in 0..iters {
        let f_prev = f.clone();
        for (i, fi) in f.iter_mut().enumerate() {
            *fi = -eps * log_sum_exp((0..m).map(|j| (g[j] - c[i][j]) / eps + log_b[j]));
        }
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = -eps * log_sum_exp((0..n).map(|i| (f_prev[i] - c[i][j]) / eps + log_a[i]));
        }
    }
    // A Jacobi pair is unmatched, so build two half-updated pairs: the
    // f-refreshed plan has exact row marginals, the g-refreshed plan exact
    // column marginals, and the mirrored run swaps them. Their average is
    // symmetric and converges like the standard alternating iteration.
    let f_half: Vec<f64> = (0..n)
        .map(|i| -eps * log_sum_exp((0..m).map(|j| (g[j] - c[i][j]) / eps + log_b[j])))
        .collect();
    let g_half: Vec<f64> = (0..m)
        .map(|j| -eps * log_sum_exp((0..n).map(|i| (f[i] - c[i][j]) / eps + log_a[i])))
        .collect();
    let mut plan = vec![vec![0.0f64; m]; n];
    let mut cost = 0.0f64;
    for i in 0..n {
        for j in 0..m {
            let row_exact = ((f_half[i] + g[j] - c[i][j]) / eps + log_a[i] + log_b[j]).exp();
            let col_exact = ((f[i] + g_half[j] - c[i][j]) / eps + log_a[i] + log_b[j]).exp();
            let p = 0.5 * (row_exact + col_exact);
            if !p.is_finite() {
                return Err(Error::numeric(format!("sinkhorn plan degenerate at ({i}, {j})")));
            }
            plan[i][j] = p;
            cost += p * c[i][j];
        }
    }
    Ok((cost, plan))
}

/// Debiased Sinkhorn divergence; symmetric and non-negative up to iteration
/// tolerance.
pub fn sinkhorn_divergence(a: &PointCloud, b: &PointCloud, eps: f64, iters: usize) -> Result<f64> {
    validate_args(a, b, eps, iters)?;
    let (ab, _) = sinkhorn_plan(a, b, eps, iters)?;
    let (aa, _) = sinkhorn_plan(a, a, eps, iters)?;
    let (bb, _) = sinkhorn_plan(b, b, eps, iters)?;
    Ok(ab - 0.5 * aa - 0.5 * bb)
}

/// Divergence plus its gradients with respect to both point sets, holding the
/// transport plans fixed (envelope differentiation through the cost matrix).
pub fn sinkhorn_divergence_with_grads(
    a: &PointCloud,
    b: &PointCloud,
    eps: f64,
    iters: usize,
) -> Result<(f64, Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    validate_args(a, b, eps, iters)?;
    let dim = a.points[0].len();
    let (ab, plan_ab) = sinkhorn_plan(a, b, eps, iters)?;
    let (aa, plan_aa) = sinkhorn_plan(a, a, eps, iters)?;
    let (bb, plan_bb) = sinkhorn_plan(b, b, eps, iters)?;

    // d<P,C>/da_i for C_ij = ||a_i - b_j||^2 is sum_j 2 P_ij (a_i - b_j);
    // the self terms pick up both row and column contributions.
    let mut grad_a = vec![vec![0.0f32; dim]; a.points.len()];
    for (i, ga) in grad_a.iter_mut().enumerate() {
        for (j, q) in b.points.iter().enumerate() {
            let p = plan_ab[i][j];
            for (d, gd) in ga.iter_mut().enumerate() {
                *gd += (2.0 * p * (a.points[i][d] as f64 - q[d] as f64)) as f32;
            }
        }
        for (j, q) in a.points.iter().enumerate() {
            // Row and column of the symmetric self plan, scaled by -1/2 * 2.
            let p = plan_aa[i][j] + plan_aa[j][i];
            for (d, gd) in ga.iter_mut().enumerate() {
                *gd -= (p * (a.points[i][d] as f64 - q[d] as f64)) as f32;
            }
        }
    }
    let mut grad_b = vec![vec![0.0f32; dim]; b.points.len()];
    for (j, gb) in grad_b.iter_mut().enumerate() {
        for (i, p_row) in plan_ab.iter().enumerate() {
            let p = p_row[j];
            for (d, gd) in gb.iter_mut().enumerate() {
                *gd += (2.0 * p * (b.points[j][d] as f64 - a.points[i][d] as f64)) as f32;
            }
        }
        for (i, q) in b.points.iter().enumerate() {
            let p = plan_bb[j][i] + plan_bb[i][j];
            for (d, gd) in gb.iter_mut().enumerate() {
                *gd -= (p * (b.points[j][d] as f64 - q[d] as f64)) as f32;
            }
        }
    }
    Ok((ab - 0.5 * aa - 0.5 * bb, grad_a, grad_b))
}

fn validate_args(a: &PointCloud, b: &PointCloud, eps: f64, iters: usize) -> Result<()> {
    if !(eps > 0.0) {
        return Err(Error::invalid_argument("sinkhorn eps must be > 0"));
    }
    if iters == 0 {
        return Err(Error::invalid_argument("sinkhorn iterations must be >= 1"));
    }
    a.validate()?;
    b.validate()?;
    if a.points[0].len() != b.points[0].len() {
        return Err(Error::invalid_argument("point dimensions differ between clouds"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[&[f32]]) -> PointCloud {
        PointCloud::uniform(points.iter().map(|p| p.to_vec()).collect())
    }

    /// Exact optimal transport between two 2-point clouds: one free
    /// parameter, linear objective, optimum at an endpoint.
    fn exact_2x2(a: &PointCloud, b: &PointCloud) -> f64 {
        let c = cost_matrix(a, b).unwrap();
        let (a1, b1) = (a.weights[0], b.weights[0]);
        // t = mass moved from a0 to b0.
        let t_lo = (a1 + b1 - 1.0).max(0.0);
        let t_hi = a1.min(b1);
        let cost_at = |t: f64| {
            t * c[0][0] + (a1 - t) * c[0][1] + (b1 - t) * c[1][0] + (1.0 - a1 - b1 + t) * c[1][1]
        };
        cost_at(t_lo).min(cost_at(t_hi))
    }

    #[test]
    fn self_divergence_vanishes() {
        let a = cloud(&[&[0.0, 0.0], &[1.0, 0.5]]);
        let d = sinkhorn_divergence(&a, &a, 0.05, 200).unwrap();
        assert!(d.abs() <= 1e-6, "self divergence {d}");
    }

    #[test]
    fn divergence_is_symmetric() {
        let a = cloud(&[&[0.0, 0.0], &[1.0, 0.5]]);
        let b = cloud(&[&[0.2, 0.1], &[0.9, 0.9]]);
        let ab = sinkhorn_divergence(&a, &b, 0.1, 300).unwrap();
        let ba = sinkhorn_divergence(&b, &a, 0.1, 300).unwrap();
        assert!((ab - ba).abs() < 1e-6);
        assert!(ab >= -1e-6);
    }

    #[test]
    fn matches_exact_small_lp_at_small_eps() {
        let a = cloud(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let b = cloud(&[&[0.0, 0.5], &[1.0, 0.75]]);
        let exact = exact_2x2(&a, &b);
        let approx = sinkhorn_divergence(&a, &b, 0.01, 2000).unwrap();
        // Debiasing subtracts self-transport (~0 for separated points), so
        // the divergence approaches the exact LP cost as eps -> 0.
        assert!(
            (approx - exact).abs() / exact.max(1e-9) < 0.02,
            "approx {approx} vs exact {exact}"
        );
    }

    #[test]
    fn gradients_point_from_target_to_source() {
        // Single-point clouds: S = ||a - b||^2 (plans are trivial), so the
        // gradient w.r.t. a is exactly 2(a - b).
        let a = cloud(&[&[0.5, 0.0]]);
        let b = cloud(&[&[0.0, 0.0]]);
        let (d, ga, gb) = sinkhorn_divergence_with_grads(&a, &b, 0.5, 100).unwrap();
        assert!((d - 0.25).abs() < 1e-6, "d {d}");
        assert!((ga[0][0] - 1.0).abs() < 1e-5, "ga {:?}", ga);
        assert!((gb[0][0] + 1.0).abs() < 1e-5, "gb {:?}", gb);
    }

    #[test]
    fn rejects_bad_arguments() {
        let a = cloud(&[&[0.0]]);
        assert!(sinkhorn_divergence(&a, &a, 0.0, 10).is_err());
        assert!(sinkhorn_divergence(&a, &a, 0.1, 0).is_err());
        let unnormalized = PointCloud { points: vec![vec![0.0]], weights: vec![0.5] };
        assert!(sinkhorn_divergence(&unnormalized, &a, 0.1, 10).is_err());
    }
}
