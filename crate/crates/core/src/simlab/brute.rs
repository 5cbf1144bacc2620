//! Derivative-free oracle for small weight problems: random multistart
//! followed by pattern search. Shares no code with the solvers it checks.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};
use crate::imbalance::BalanceTarget;

use super::rng_for;

pub const MAX_FREE_WEIGHTS: usize = 8;
const STARTS: usize = 1000;
const REFINED: usize = 8;
const FINAL_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BruteDomain {
    /// Unconstrained; starts are drawn uniformly from `center ± radius`.
    Free { center: f64, radius: f64 },
    /// `γ ≥ 0`, `Σ γ = total`.
    Simplex { total: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub evaluations: usize,
}

/// Minimizes `objective` over `m ≤ 8` free weights.
pub fn brute_force_weights<F: Fn(&[f64]) -> f64>(
    m: usize,
    objective: F,
    domain: BruteDomain,
    seed: u64,
) -> Result<BruteForceResult> {
    if m > MAX_FREE_WEIGHTS {
        return Err(Error::TooLarge(m));
    }
    if m == 0 {
        return Err(Error::EmptyGroup);
    }
    let mut rng = rng_for(seed, 0);
    let mut evaluations = 0;
    let mut eval = |x: &[f64]| {
        evaluations += 1;
        objective(x)
    };
    let mut starts: Vec<(f64, Vec<f64>)> = (0..STARTS)
        .map(|_| {
            let x: Vec<f64> = match domain {
                BruteDomain::Free { center, radius } => {
                    (0..m).map(|_| center + radius * (2.0 * rng.gen::<f64>() - 1.0)).collect()
                }
                BruteDomain::Simplex { total } => {
                    let e: Vec<f64> = (0..m).map(|_| Exp1.sample(&mut rng)).collect();
                    let s: f64 = e.iter().sum();
                    e.iter().map(|v| v / s * total).collect()
                }
            };
            (eval(&x), x)
        })
        .collect();
    starts.sort_by(|a, b| a.0.total_cmp(&b.0));

    let initial_step = match domain {
        BruteDomain::Free { radius, .. } => radius / 4.0,
        BruteDomain::Simplex { total } => total / (4.0 * m as f64),
    };
    let mut best = (f64::INFINITY, Vec::new());
    for (f0, x0) in starts.into_iter().take(REFINED) {
        let (f, x) = pattern_search(&mut eval, x0, f0, initial_step, domain);
        if f < best.0 {
            best = (f, x);
        }
    }
    Ok(BruteForceResult {
        weights: best.1,
        objective: best.0,
        evaluations,
    })
}

/// Moves along `±e_i` (unconstrained only) and `±(e_i − e_j)`; the step
/// doubles after a success and halves after a full sweep without one.
fn pattern_search<F: FnMut(&[f64]) -> f64>(
    eval: &mut F,
    mut x: Vec<f64>,
    mut fx: f64,
    mut step: f64,
    domain: BruteDomain,
) -> (f64, Vec<f64>) {
    let m = x.len();
    let mut dirs: Vec<(usize, Option<usize>)> = Vec::new();
    if matches!(domain, BruteDomain::Free { .. }) {
        dirs.extend((0..m).map(|i| (i, None)));
    }
    for i in 0..m {
        for j in 0..m {
            if i != j {
                dirs.push((i, Some(j)));
            }
        }
    }
    while step >= FINAL_STEP {
        let mut improved = false;
        for &(i, j) in &dirs {
            for sign in [1.0, -1.0] {
                let mut y = x.clone();
                match (domain, j) {
                    (BruteDomain::Simplex { .. }, Some(j)) => {
                        // Transfer mass from j to i without leaving the simplex.
                        if sign < 0.0 {
                            continue;
                        }
                        let amount = step.min(y[j]);
                        if amount <= 0.0 {
                            continue;
                        }
                        y[i] += amount;
                        y[j] -= amount;
                    }
                    (_, Some(j)) => {
                        y[i] += sign * step;
                        y[j] -= sign * step;
                    }
                    (_, None) => y[i] += sign * step,
                }
                let fy = eval(&y);
                if fy < fx {
                    // Keep going in the same direction while it pays.
                    let d: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
                    x = y;
                    fx = fy;
                    loop {
                        let z: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + 2.0 * b).collect();
                        if z.iter().any(|&v| v < 0.0) && matches!(domain, BruteDomain::Simplex { .. }) {
                            break;
                        }
                        let fz = eval(&z);
                        if fz < fx {
                            x = z;
                            fx = fz;
                        } else {
                            break;
                        }
                    }
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (fx, x)
}

/// `Σ_j λ_j² d_j² + (σ²/n²) Σ_A γ_i²` as a function of the weighted group's
/// weights, evaluated by direct summation. Every `λ_j` must be finite.
pub fn minimax_objective<'a>(
    fm: &'a FeatureMatrix<f64>,
    treatment: &'a [bool],
    target: &'a BalanceTarget<f64>,
    sigma2: f64,
) -> Result<impl Fn(&[f64]) -> f64 + 'a> {
    if fm.scales().iter().any(|l| l.is_infinite()) {
        return Err(Error::Invalid("brute force needs finite scales".into()));
    }
    let idx: Vec<usize> = (0..treatment.len()).filter(|&i| treatment[i]).collect();
    let n = fm.n() as f64;
    Ok(move |g: &[f64]| {
        let mut total = 0.0;
        for j in 0..fm.p() {
            let mut avg = 0.0;
            for (a, &i) in idx.iter().enumerate() {
                avg += g[a] * fm.values()[(i, j)];
            }
            let d = target.target_means[j] - avg / n;
            let l = fm.scales()[j];
            total += l * l * d * d;
        }
        total + sigma2 * g.iter().map(|v| v * v).sum::<f64>() / (n * n)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    #[test]
    fn finds_exact_balance() {
        // Two treated units bracketing the target: exact balance has zero cost.
        let fm = FeatureMatrix::from_raw(Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 2.0], vec![1.0, 1.5], vec![1.0, 0.5]]));
        let t = [true, true, false, false];
        let target = BalanceTarget::full_sample(&fm);
        let f = minimax_objective(&fm, &t, &target, 0.0).unwrap();
        let r = brute_force_weights(2, &f, BruteDomain::Free { center: 2.0, radius: 4.0 }, 1).unwrap();
        // weights (2, 2) match both the intercept and the mean of 1.0
        assert!((r.weights[0] - 2.0).abs() < 1e-4 && (r.weights[1] - 2.0).abs() < 1e-4);
        assert!(r.objective < 1e-10);
    }

    #[test]
    fn simplex_feasibility() {
        let f = |g: &[f64]| (g[0] - 3.0).powi(2) + g[1] * g[2];
        let r = brute_force_weights(3, f, BruteDomain::Simplex { total: 2.0 }, 5).unwrap();
        assert!(r.weights.iter().all(|&v| v >= 0.0));
        assert!((r.weights.iter().sum::<f64>() - 2.0).abs() < 1e-9);
        assert!((r.weights[0] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn rejects_large_instances() {
        assert!(matches!(
            brute_force_weights(9, |_: &[f64]| 0.0, BruteDomain::Simplex { total: 1.0 }, 0),
            Err(Error::TooLarge(9))
        ));
    }
}
