//! Accelerated proximal gradient on the dual objective
//! `(1/n) Σ_{i∈A} χ*(θ·φ_i) − θ·b + pen(θ)`.

use crate::dataset::{Arm, FeatureMatrix};
use crate::error::{Error, Result};
use crate::imbalance::BalanceTarget;
use crate::linalg::{largest_eigenvalue, Matrix};
use crate::scalar::{dot, Scalar};

use super::{implied_weights, DispersionSpec, DualSolution, PenaltyKind, PenaltySpec, SolveStatus, SolverOptions};

struct Problem<'a, T> {
    phi: Matrix<T>,
    b: &'a [T],
    n: T,
    chi: DispersionSpec,
    /// Coordinates pinned at zero (`λ_j = 0`).
    fixed: Vec<bool>,
    /// Soft-threshold weights `1/λ_j` (l1 kind), zero where unpenalized.
    l1: Vec<T>,
    /// Ridge weights `σ²/(n λ_j²)` (l2 kind).
    ridge: Vec<T>,
    exp_cap: T,
}

struct Point<T> {
    theta: Vec<T>,
    /// `Φ_A θ`.
    u: Vec<T>,
    /// Smooth part of the objective; `+∞` if the exp cap was hit.
    f: T,
    grad: Vec<T>,
}

impl<T: Scalar> Problem<'_, T> {
    fn eval(&self, theta: Vec<T>) -> Point<T> {
        let u = self.phi.matvec(&theta);
        if self.chi == DispersionSpec::Entropy && u.iter().any(|&v| v > self.exp_cap) {
            let p = theta.len();
            return Point {
                theta,
                u,
                f: T::infinity(),
                grad: vec![T::zero(); p],
            };
        }
        let mut f = u.iter().map(|&v| self.chi.conjugate(v)).sum::<T>() / self.n - dot(&theta, self.b);
        let eta: Vec<T> = u.iter().map(|&v| self.chi.link(v)).collect();
        let mut grad = self.phi.tmatvec(&eta);
        for j in 0..grad.len() {
            grad[j] = grad[j] / self.n - self.b[j];
            if self.ridge[j] > T::zero() {
                f += self.ridge[j] * theta[j] * theta[j] * T::half();
                grad[j] += self.ridge[j] * theta[j];
            }
            if self.fixed[j] {
                grad[j] = T::zero();
            }
        }
        Point { theta, u, f, grad }
    }

    /// `f(b) − f(a)` for the smooth part, evaluated without cancellation so
    /// that progress stays visible once it drops below the rounding level of `f`.
    fn smooth_delta(&self, a: &Point<T>, b: &Point<T>) -> T {
        let dtheta: Vec<T> = b.theta.iter().zip(&a.theta).map(|(&x, &y)| x - y).collect();
        let du = self.phi.matvec(&dtheta);
        let conj: T = a
            .u
            .iter()
            .zip(&b.u)
            .zip(&du)
            .map(|((&ua, &ub), &d)| match self.chi {
                DispersionSpec::Quadratic => d * (ua + ua + d) * T::half(),
                DispersionSpec::QuadraticNonneg if ua >= T::zero() && ub >= T::zero() => {
                    d * (ua + ub) * T::half()
                }
                DispersionSpec::QuadraticNonneg => {
                    let (pa, pb) = (ua.max(T::zero()), ub.max(T::zero()));
                    (pb - pa) * (pb + pa) * T::half()
                }
                DispersionSpec::Entropy => ua.exp() * d.exp_m1(),
            })
            .sum();
        let mut delta = conj / self.n - dot(&dtheta, self.b);
        for j in 0..dtheta.len() {
            if self.ridge[j] > T::zero() {
                delta += self.ridge[j] * dtheta[j] * (a.theta[j] + b.theta[j]) * T::half();
            }
        }
        delta
    }

    fn nonsmooth(&self, theta: &[T]) -> T {
        theta.iter().zip(&self.l1).map(|(&t, &c)| c * t.abs()).sum()
    }

    fn nonsmooth_delta(&self, a: &[T], b: &[T]) -> T {
        a.iter()
            .zip(b)
            .zip(&self.l1)
            .map(|((&x, &y), &c)| c * (y.abs() - x.abs()))
            .sum()
    }

    fn total(&self, pt: &Point<T>) -> T {
        pt.f + self.nonsmooth(&pt.theta)
    }

    /// `prox_{step·h}(v)` with `h(θ) = Σ c_j |θ_j|` and pinned coordinates.
    fn prox(&self, v: &[T], step: T) -> Vec<T> {
        v.iter()
            .enumerate()
            .map(|(j, &x)| {
                if self.fixed[j] {
                    T::zero()
                } else {
                    let thr = step * self.l1[j];
                    x.signum() * (x.abs() - thr).max(T::zero())
                }
            })
            .collect()
    }

    /// Sup norm of `θ − prox_h(θ − ∇f(θ))`.
    fn mapping_norm(&self, pt: &Point<T>) -> T {
        let v: Vec<T> = pt.theta.iter().zip(&pt.grad).map(|(&t, &g)| t - g).collect();
        let z = self.prox(&v, T::one());
        pt.theta
            .iter()
            .zip(z)
            .fold(T::zero(), |m, (&t, zj)| m.max((t - zj).abs()))
    }
}

/// Minimizes the dual objective by proximal gradient with backtracking and
/// monotone momentum, starting from `θ = 0`. Weights are `η(θ·φ(X_i))` on `arm`.
///
/// Exact-balance columns (`λ_j = ∞`) are unpenalized, columns with `λ_j = 0`
/// keep `θ_j = 0`. Non-convergence is reported through `status`, not as an error.
pub fn solve_dual<T: Scalar>(
    fm: &FeatureMatrix<T>,
    treatment: &[bool],
    arm: Arm,
    target: &BalanceTarget<T>,
    chi: DispersionSpec,
    pen: &PenaltySpec,
    opts: &SolverOptions,
) -> Result<DualSolution<T>> {
    pen.validate()?;
    let (n, p) = (fm.n(), fm.p());
    if treatment.len() != n {
        return Err(Error::Dimension(format!("{} treatment entries for {n} units", treatment.len())));
    }
    if target.len() != p {
        return Err(Error::Dimension(format!("target has {} means for {p} features", target.len())));
    }
    if !(opts.tolerance >= 0.0) || opts.max_iter == 0 {
        return Err(Error::Invalid("tolerance must be >= 0 and max_iter >= 1".into()));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| arm.contains(treatment[i])).collect();
    if idx.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let nf = T::from_usize_lossy(n);
    let sigma2 = T::lit(pen.sigma2);
    let scales = fm.scales();
    let fixed: Vec<bool> = scales.iter().map(|&l| l == T::zero()).collect();
    let (l1, ridge): (Vec<T>, Vec<T>) = scales
        .iter()
        .map(|&l| {
            if l == T::zero() || l.is_infinite() {
                (T::zero(), T::zero())
            } else {
                match pen.kind {
                    PenaltyKind::L1Scaled => (T::one() / l, T::zero()),
                    PenaltyKind::L2Scaled => (T::zero(), sigma2 / (nf * l * l)),
                }
            }
        })
        .unzip();
    let prob = Problem {
        phi: fm.values().select_rows(&idx),
        b: &target.target_means,
        n: nf,
        chi,
        fixed,
        l1,
        ridge,
        exp_cap: T::lit(opts.exp_cap),
    };
    let col_max: Vec<T> = (0..p)
        .map(|j| prob.phi.iter_rows().fold(T::zero(), |m, r| m.max(r[j].abs())))
        .collect();

    let tol = T::lit(opts.tolerance).max(T::epsilon() * T::lit(1e3));
    let gram = prob.phi.weighted_gram(&vec![T::one() / nf; idx.len()]);
    let ridge_max = prob.ridge.iter().fold(T::zero(), |m, &r| m.max(r));
    let mut lip = (largest_eigenvalue(&gram, 200) + ridge_max).max(T::lit(1e-12));
    let lip_ceiling = T::lit(1e30);

    let mut x = prob.eval(vec![T::zero(); p]);
    let mut big_f = prob.total(&x);
    let mut trace = vec![big_f];
    let mut y_theta = x.theta.clone();
    let mut momentum = T::one();
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;
    let mut grad_norm = prob.mapping_norm(&x);
    let mut rejected_from_x = false;

    for it in 1..=opts.max_iter {
        grad_norm = prob.mapping_norm(&x);
        if grad_norm <= tol {
            status = SolveStatus::Converged;
            break;
        }
        iterations = it;
        let at_x = y_theta == x.theta;
        let y = if at_x {
            Point {
                theta: x.theta.clone(),
                u: x.u.clone(),
                f: x.f,
                grad: x.grad.clone(),
            }
        } else {
            prob.eval(y_theta.clone())
        };
        if !y.f.is_finite() {
            // Momentum overshot into the overflow region; restart from x.
            y_theta = x.theta.clone();
            momentum = T::one();
            continue;
        }

        let mut hit_overflow = false;
        let z = loop {
            let step = T::one() / lip;
            let v: Vec<T> = y.theta.iter().zip(&y.grad).map(|(&t, &g)| t - step * g).collect();
            let z = prob.eval(prob.prox(&v, step));
            if z.f.is_finite() {
                let diff: Vec<T> = z.theta.iter().zip(&y.theta).map(|(&a, &b)| a - b).collect();
                let lin = dot(&y.grad, &diff);
                let quad = lip * T::half() * dot(&diff, &diff);
                let slack = T::epsilon() * T::lit(16.0) * (lin.abs() + quad);
                if prob.smooth_delta(&y, &z) <= lin + quad + slack {
                    break Some(z);
                }
            } else {
                hit_overflow = true;
            }
            lip = lip + lip;
            if lip > lip_ceiling {
                break None;
            }
        };
        let Some(z) = z else {
            status = if hit_overflow { SolveStatus::Overflow } else { SolveStatus::Stalled };
            break;
        };

        let delta = prob.smooth_delta(&x, &z) + prob.nonsmooth_delta(&x.theta, &z.theta);
        if delta <= T::zero() {
            let next_momentum = (T::one() + (T::one() + T::lit(4.0) * momentum * momentum).sqrt()) * T::half();
            let beta = (momentum - T::one()) / next_momentum;
            y_theta = z
                .theta
                .iter()
                .zip(&x.theta)
                .map(|(&a, &b)| a + beta * (a - b))
                .collect();
            momentum = next_momentum;
            let moved = z.theta != x.theta;
            x = z;
            big_f += delta;
            rejected_from_x = false;
            if !moved {
                // Fixed point of the prox step at the current precision.
                trace.push(big_f);
                grad_norm = prob.mapping_norm(&x);
                status = if grad_norm <= tol { SolveStatus::Converged } else { SolveStatus::Stalled };
                break;
            }
        } else {
            if at_x && rejected_from_x {
                trace.push(big_f);
                status = SolveStatus::Stalled;
                break;
            }
            rejected_from_x = at_x;
            y_theta = x.theta.clone();
            momentum = T::one();
        }
        trace.push(big_f);
        lip = (lip * T::lit(0.9)).max(T::lit(1e-12));

        let diverged = (0..p).any(|j| {
            fm.scales()[j].is_infinite() && x.theta[j].abs() * col_max[j] > T::lit(opts.divergence_bound)
        });
        if diverged {
            status = SolveStatus::Infeasible;
            break;
        }
    }
    if status == SolveStatus::MaxIterations {
        grad_norm = prob.mapping_norm(&x);
        if grad_norm <= tol {
            status = SolveStatus::Converged;
        }
    }

    let weights = implied_weights(fm, treatment, arm, chi, &x.theta)?;
    Ok(DualSolution {
        theta: x.theta,
        weights,
        objective_trace: trace,
        grad_norm,
        iterations,
        converged: status == SolveStatus::Converged,
        status,
    })
}
