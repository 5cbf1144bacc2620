//! Closed-form minimax weights for the scaled l2 model ball with quadratic
//! dispersion: `(Φ_Aᵀ Φ_A + σ² Λ⁻²) θ = n b` and `γ_i = θ·φ(X_i)`.

use crate::dataset::{Arm, FeatureMatrix};
use crate::error::{Error, Result};
use crate::imbalance::BalanceTarget;
use crate::linalg::{symmetric_eigen, Cholesky, Matrix};
use crate::scalar::{dot, Scalar};

use super::{implied_weights, DispersionSpec, DualSolution, SolveStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MinimaxOptions {
    pub arm: Arm,
    /// Adds a `1e-12` relative ridge instead of failing on a singular system.
    pub ridge_tiebreak: bool,
}

/// Minimizes `Σ_j λ_j² d_j² + (σ²/n²) Σ_{i∈A} γ_i²` in closed form.
///
/// Columns with `λ_j = ∞` carry no ridge term; columns with `λ_j = 0` do not
/// enter the model and keep `θ_j = 0`.
pub fn solve_minimax_l2<T: Scalar>(
    fm: &FeatureMatrix<T>,
    treatment: &[bool],
    target: &BalanceTarget<T>,
    sigma2: f64,
    opts: &MinimaxOptions,
) -> Result<DualSolution<T>> {
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::Invalid(format!("sigma2 = {sigma2} must be finite and >= 0")));
    }
    let (n, p) = (fm.n(), fm.p());
    if treatment.len() != n || target.len() != p {
        return Err(Error::Dimension("features, treatment and target disagree".into()));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| opts.arm.contains(treatment[i])).collect();
    if idx.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let active: Vec<usize> = (0..p).filter(|&j| fm.scales()[j] > T::zero()).collect();
    let nf = T::from_usize_lossy(n);
    let s2 = T::lit(sigma2);

    let phi_a = fm.values().select_rows(&idx);
    let q = active.len();
    let full_gram = phi_a.weighted_gram(&vec![T::one(); idx.len()]);
    let mut m = Matrix::zeros(q, q);
    for (a, &ja) in active.iter().enumerate() {
        for (c, &jc) in active.iter().enumerate() {
            m[(a, c)] = full_gram[(ja, jc)];
        }
        let l = fm.scales()[ja];
        if l.is_finite() {
            m[(a, a)] += s2 / (l * l);
        }
    }
    let rhs: Vec<T> = active.iter().map(|&j| nf * target.target_means[j]).collect();

    let rel_tol = T::epsilon() * T::lit(1e4);
    let beta = match Cholesky::new(&m, rel_tol) {
        Ok(ch) => ch.solve(&rhs),
        Err(_) if opts.ridge_tiebreak => {
            let jitter = T::lit(1e-12) * (m.trace() / T::from_usize_lossy(q.max(1))).max(T::one());
            for a in 0..q {
                m[(a, a)] += jitter;
            }
            Cholesky::new(&m, T::zero())
                .map_err(|_| singular(fm, &active, &m))?
                .solve(&rhs)
        }
        Err(_) => return Err(singular(fm, &active, &m)),
    };
    let mut theta = vec![T::zero(); p];
    for (&j, &v) in active.iter().zip(&beta) {
        theta[j] = v;
    }

    let u = phi_a.matvec(&theta);
    let mut obj = u.iter().map(|&v| v * v).sum::<T>() * T::half() / nf - dot(&theta, &target.target_means);
    for &j in &active {
        let l = fm.scales()[j];
        if l.is_finite() {
            obj += s2 * theta[j] * theta[j] / (T::two() * nf * l * l);
        }
    }
    let mu = m.matvec(&beta);
    let resid = mu
        .iter()
        .zip(&rhs)
        .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
        / nf;

    let weights = implied_weights(fm, treatment, opts.arm, DispersionSpec::Quadratic, &theta)?;
    Ok(DualSolution {
        theta,
        weights,
        objective_trace: vec![obj],
        grad_norm: resid,
        iterations: 1,
        converged: true,
        status: SolveStatus::Converged,
    })
}

fn singular<T: Scalar>(fm: &FeatureMatrix<T>, active: &[usize], m: &Matrix<T>) -> Error {
    let (vals, vecs) = symmetric_eigen(m);
    let k = (0..vals.len())
        .min_by(|&a, &b| vals[a].partial_cmp(&vals[b]).expect("finite eigenvalues"))
        .unwrap_or(0);
    let columns = (0..active.len())
        .filter(|&a| vecs[(a, k)].abs() > T::lit(1e-3))
        .map(|a| fm.labels()[active[a]].clone())
        .collect();
    Error::Singular {
        columns,
        hint: "; set sigma2 > 0, drop a column, or enable ridge_tiebreak".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imbalance::TargetProvenance;

    #[test]
    fn exact_balance_with_one_treated_unit() {
        let fm = FeatureMatrix::<f64>::from_raw(Matrix::from_row_major(2, 1, vec![1.0, 3.0]));
        let t = BalanceTarget::full_sample(&fm);
        let sol = solve_minimax_l2(&fm, &[true, false], &t, 0.0, &MinimaxOptions::default()).unwrap();
        assert!((sol.weights.values()[0] - 4.0).abs() < 1e-12);
        assert_eq!(sol.weights.values()[1], 0.0);
    }

    #[test]
    fn huge_sigma_shrinks_weights_to_zero() {
        let fm = FeatureMatrix::<f64>::from_raw(Matrix::from_rows(&[
            vec![1.0, 0.3],
            vec![1.0, -1.2],
            vec![1.0, 0.8],
            vec![1.0, 2.0],
        ]));
        let t = BalanceTarget::full_sample(&fm);
        let sol = solve_minimax_l2(&fm, &[true, true, false, true], &t, 1e12, &MinimaxOptions::default()).unwrap();
        assert!(sol.weights.values().iter().all(|w| w.abs() < 1e-6));
    }

    #[test]
    fn collinear_columns_are_named() {
        let fm = FeatureMatrix::new(
            Matrix::from_rows(&[vec![1.0, 2.0, 0.5], vec![2.0, 4.0, 0.1], vec![3.0, 6.0, 0.7], vec![0.0, 0.0, 1.0]]),
            vec![1.0; 3],
            vec!["a".into(), "b".into(), "c".into()],
            None,
        )
        .unwrap();
        let t = BalanceTarget::new(vec![1.0, 2.0, 0.3], TargetProvenance::Custom);
        let treat = [true, true, true, false];
        match solve_minimax_l2(&fm, &treat, &t, 0.0, &MinimaxOptions::default()) {
            Err(Error::Singular { columns, .. }) => assert_eq!(columns, ["a", "b"]),
            other => panic!("expected singular error, got {other:?}"),
        }
        let opts = MinimaxOptions {
            ridge_tiebreak: true,
            ..MinimaxOptions::default()
        };
        assert!(solve_minimax_l2(&fm, &treat, &t, 0.0, &opts).is_ok());
    }
}
