//! The primal weight problem: objective evaluation and a direct solver that
//! works on `γ` without going through the dual.

use crate::dataset::{Arm, FeatureMatrix};
use crate::error::{Error, Result};
use crate::imbalance::{feature_imbalance, BalanceTarget, WeightVector};
use crate::scalar::Scalar;

use super::{DispersionSpec, PenaltyKind, PenaltySpec};

/// Slack allowed on hard imbalance caps and exact-balance constraints.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// `ζ{Imbalance(γ)} + (1/n²) Σ_{i∈A} χ(γ_i)` for the l1-scaled penalty, and
/// `Σ_j λ_j² d_j² + (2σ²/n²) Σ_{i∈A} χ(γ_i)` for the l2-scaled one. Violated
/// caps or exact constraints give `+∞`.
pub fn primal_objective<T: Scalar>(
    fm: &FeatureMatrix<T>,
    treatment: &[bool],
    target: &BalanceTarget<T>,
    g: &WeightVector<T>,
    chi: DispersionSpec,
    pen: &PenaltySpec,
) -> Result<T> {
    let d = feature_imbalance(fm, treatment, g, target)?;
    let tol = T::lit(FEASIBILITY_TOL);
    let nf = T::from_usize_lossy(fm.n());
    let arm = g.arm();
    let chi_sum: T = g
        .values()
        .iter()
        .zip(treatment)
        .filter(|(_, &t)| arm.contains(t))
        .map(|(&v, _)| chi.chi(v))
        .sum();
    let mut imbalance_term = T::zero();
    for (&dj, &l) in d.iter().zip(fm.scales()) {
        if l == T::zero() {
            continue;
        }
        if l.is_infinite() {
            if dj.abs() > tol {
                return Ok(T::infinity());
            }
            continue;
        }
        match pen.kind {
            PenaltyKind::L1Scaled => {
                if dj.abs() > T::one() / l + tol {
                    return Ok(T::infinity());
                }
            }
            PenaltyKind::L2Scaled => imbalance_term += l * l * dj * dj,
        }
    }
    let chi_weight = match pen.kind {
        PenaltyKind::L1Scaled => T::one(),
        PenaltyKind::L2Scaled => T::two() * T::lit(pen.sigma2),
    };
    Ok(imbalance_term + chi_weight * chi_sum / (nf * nf))
}

/// Result of [`solve_primal_direct`].
#[derive(Debug, Clone)]
pub struct PrimalSolution {
    pub weights: WeightVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Lower bound on entropy weights inside the direct solver.
const ENTROPY_FLOOR: f64 = 1e-12;

/// Solves the primal weight problem directly in `γ` by variable-metric
/// projected steps: each step minimizes the second-order model of the
/// objective over the constraint polyhedron (a strictly convex QP). The
/// quadratic dispersions are solved by a single QP.
///
/// The l2-scaled penalty needs `σ² > 0`.
pub fn solve_primal_direct(
    fm: &FeatureMatrix<f64>,
    treatment: &[bool],
    arm: Arm,
    target: &BalanceTarget<f64>,
    chi: DispersionSpec,
    pen: &PenaltySpec,
) -> Result<PrimalSolution> {
    pen.validate()?;
    let (n, p) = (fm.n(), fm.p());
    if treatment.len() != n || target.len() != p {
        return Err(Error::Dimension("features, treatment and target disagree".into()));
    }
    if pen.kind == PenaltyKind::L2Scaled && pen.sigma2 <= 0.0 {
        return Err(Error::Invalid("direct primal solve with the l2 penalty needs sigma2 > 0".into()));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| arm.contains(treatment[i])).collect();
    let m = idx.len();
    if m == 0 {
        return Err(Error::EmptyGroup);
    }
    let nf = n as f64;
    let phi = fm.values().select_rows(&idx);
    let b = &target.target_means;
    let scales = fm.scales();

    // Constraint rows over γ_A: equalities first, then `row·γ ≤ rhs`.
    let mut eq_rows: Vec<Vec<f64>> = Vec::new();
    let mut eq_rhs = Vec::new();
    let mut ineq_rows: Vec<Vec<f64>> = Vec::new();
    let mut ineq_rhs = Vec::new();
    for j in 0..p {
        let col: Vec<f64> = (0..m).map(|i| phi[(i, j)] / nf).collect();
        let l = scales[j];
        if l.is_infinite() {
            eq_rows.push(col);
            eq_rhs.push(b[j]);
        } else if l > 0.0 && pen.kind == PenaltyKind::L1Scaled {
            let cap = 1.0 / l;
            ineq_rows.push(col.iter().map(|v| -v).collect());
            ineq_rhs.push(cap - b[j]);
            ineq_rows.push(col);
            ineq_rhs.push(cap + b[j]);
        }
    }
    let floor = match chi {
        DispersionSpec::Quadratic => None,
        DispersionSpec::QuadraticNonneg => Some(0.0),
        DispersionSpec::Entropy => Some(ENTROPY_FLOOR),
    };
    if let Some(lb) = floor {
        for i in 0..m {
            let mut row = vec![0.0; m];
            row[i] = -1.0;
            ineq_rows.push(row);
            ineq_rhs.push(-lb);
        }
    }
    let meq = eq_rows.len();
    let amat: Vec<f64> = eq_rows.iter().chain(&ineq_rows).flatten().copied().collect();
    let bvec: Vec<f64> = eq_rhs.iter().chain(&ineq_rhs).copied().collect();

    // Quadratic imbalance part for the l2 kind, scaled by n/(2σ²):
    // (n/(2σ²)) Σ λ_j² d_j², Hessian (1/(n σ²)) Φ_A Λ² Φ_Aᵀ.
    let ridge: Vec<(usize, f64)> = match pen.kind {
        PenaltyKind::L2Scaled => (0..p)
            .filter(|&j| scales[j] > 0.0 && scales[j].is_finite())
            .map(|j| (j, scales[j] * scales[j]))
            .collect(),
        PenaltyKind::L1Scaled => Vec::new(),
    };
    let s2 = pen.sigma2;
    let imb_hess = {
        let mut h = vec![0.0; m * m];
        for &(j, l2) in &ridge {
            for a in 0..m {
                for c in 0..m {
                    h[a * m + c] += l2 * phi[(a, j)] * phi[(c, j)] / (nf * s2);
                }
            }
        }
        h
    };
    let objective = |gamma: &[f64]| -> f64 {
        let mut f: f64 = gamma.iter().map(|&v| chi.chi(v)).sum::<f64>() / nf;
        for &(j, l2) in &ridge {
            let avg: f64 = (0..m).map(|i| phi[(i, j)] * gamma[i]).sum::<f64>() / nf;
            f += nf / (2.0 * s2) * l2 * (b[j] - avg).powi(2);
        }
        f
    };
    let gradient = |gamma: &[f64]| -> Vec<f64> {
        let mut g: Vec<f64> = gamma
            .iter()
            .map(|&v| match chi {
                DispersionSpec::Entropy => v.ln() / nf,
                _ => v / nf,
            })
            .collect();
        for &(j, l2) in &ridge {
            let avg: f64 = (0..m).map(|i| phi[(i, j)] * gamma[i]).sum::<f64>() / nf;
            let dj = b[j] - avg;
            for i in 0..m {
                g[i] -= l2 * phi[(i, j)] * dj / s2;
            }
        }
        g
    };

    let mut gamma = vec![nf / m as f64; m];
    let quadratic = chi != DispersionSpec::Entropy;
    let max_iter = if quadratic { 1 } else { 200 };
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        let grad = gradient(&gamma);
        let mut q = imb_hess.clone();
        for i in 0..m {
            q[i * m + i] += match chi {
                DispersionSpec::Entropy => 1.0 / (nf * gamma[i]),
                _ => 1.0 / nf,
            };
        }
        // Model: grad·(x−γ) + ½(x−γ)ᵀQ(x−γ), i.e. linear term grad − Qγ.
        let mut c = grad.clone();
        for a in 0..m {
            for k in 0..m {
                c[a] -= q[a * m + k] * gamma[k];
            }
        }
        let sol = quadprog::solve_qp(&mut q, &c, &amat, &bvec, meq, false)
            .map_err(|e| Error::Infeasible(format!("primal QP: {e}")))?;
        let x = sol.sol;
        if quadratic {
            gamma = x;
            converged = true;
            break;
        }
        let dir: Vec<f64> = x.iter().zip(&gamma).map(|(a, g)| a - g).collect();
        let size = dir.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if it == 0 {
            // The starting point need not be feasible; the first model minimizer is.
            gamma = x;
            continue;
        }
        if size <= 1e-12 * gamma.iter().fold(1.0f64, |acc, v| acc.max(v.abs())) {
            converged = true;
            break;
        }
        // Close to the solution the full step is taken: the model is exact to
        // second order and objective differences drop below rounding.
        let f0 = objective(&gamma);
        let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let mut step = 1.0;
        let mut next;
        loop {
            next = gamma.iter().zip(&dir).map(|(g, d)| g + step * d).collect::<Vec<_>>();
            if size <= 1e-6 || objective(&next) <= f0 + 1e-4 * step * slope || step < 1e-12 {
                break;
            }
            step *= 0.5;
        }
        gamma = next;
    }
    let weights = WeightVector::from_group(&gamma, treatment, arm)?;
    Ok(PrimalSolution {
        weights,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn small() -> (FeatureMatrix<f64>, Vec<bool>) {
        let fm = FeatureMatrix::new(
            Matrix::from_rows(&[
                vec![1.0, 0.2],
                vec![1.0, 1.4],
                vec![1.0, -0.6],
                vec![1.0, 0.9],
                vec![1.0, 0.1],
            ]),
            vec![f64::INFINITY, 2.0],
            vec!["(intercept)".into(), "x".into()],
            Some(0),
        )
        .unwrap();
        (fm, vec![true, false, true, true, false])
    }

    #[test]
    fn zero_weights_under_l2_leave_only_imbalance() {
        let (fm, treat) = small();
        let fm = fm.with_scales(vec![1.0, 2.0]).unwrap();
        let t = BalanceTarget::full_sample(&fm);
        let g = WeightVector::new(vec![0.0; 5], &treat, Arm::Treated).unwrap();
        let v = primal_objective(&fm, &treat, &t, &g, DispersionSpec::Quadratic, &PenaltySpec::l2(3.0)).unwrap();
        let d = &t.target_means;
        assert!((v - (d[0] * d[0] + 4.0 * d[1] * d[1])).abs() < 1e-15);
    }

    #[test]
    fn cap_violation_is_infinite() {
        let (fm, treat) = small();
        let t = BalanceTarget::full_sample(&fm);
        let g = WeightVector::new(vec![0.0; 5], &treat, Arm::Treated).unwrap();
        let v = primal_objective(&fm, &treat, &t, &g, DispersionSpec::Quadratic, &PenaltySpec::l1()).unwrap();
        assert_eq!(v, f64::INFINITY);
    }

    #[test]
    fn entropy_of_unit_weights() {
        let fm = FeatureMatrix::new(
            Matrix::from_row_major(2, 1, vec![1.0, 1.0]),
            vec![0.0],
            vec!["(intercept)".into()],
            Some(0),
        )
        .unwrap();
        let treat = [true, true];
        let t = BalanceTarget::full_sample(&fm);
        let g = WeightVector::new(vec![1.0, 1.0], &treat, Arm::Treated).unwrap();
        let v = primal_objective(&fm, &treat, &t, &g, DispersionSpec::Entropy, &PenaltySpec::l1()).unwrap();
        // Two weighted units with χ(1) = −1 each, over n² = 4.
        assert_eq!(v, -0.5);
    }

    #[test]
    fn direct_solve_is_feasible() {
        let (fm, treat) = small();
        let t = BalanceTarget::full_sample(&fm);
        for chi in [DispersionSpec::Quadratic, DispersionSpec::QuadraticNonneg, DispersionSpec::Entropy] {
            let sol = solve_primal_direct(&fm, &treat, Arm::Treated, &t, chi, &PenaltySpec::l1()).unwrap();
            assert!(sol.converged);
            let v = primal_objective(&fm, &treat, &t, &sol.weights, chi, &PenaltySpec::l1()).unwrap();
            assert!(v.is_finite());
        }
    }
}
