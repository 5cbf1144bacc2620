//! Balancing weights from dual objectives.
//!
//! A dispersion `χ` and a penalty on imbalance define the primal weight
//! problem; its dual is a penalized regression-type problem in coefficients
//! `θ`, and the weights are recovered through the link `γ_i = η(θ·φ(X_i))`.

mod minimax;
mod primal;
mod solver;
mod verify;

use serde::{Deserialize, Serialize};

use crate::dataset::{Arm, FeatureMatrix};
use crate::error::{Error, Result};
use crate::imbalance::{BalanceTarget, WeightVector};
use crate::scalar::Scalar;

pub use minimax::{solve_minimax_l2, MinimaxOptions};
pub use primal::{primal_objective, solve_primal_direct, PrimalSolution, FEASIBILITY_TOL};
pub use solver::solve_dual;
pub use verify::{verify_duality, DualityReport};

/// The dispersion `χ` penalizing the size of the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DispersionSpec {
    /// `χ(γ) = γ²/2`; weights may be negative.
    #[default]
    Quadratic,
    /// `χ(γ) = γ²/2` on `γ ≥ 0`.
    QuadraticNonneg,
    /// `χ(γ) = γ(log γ − 1)`.
    Entropy,
}

impl DispersionSpec {
    /// Link `η = (χ*)'`.
    #[inline]
    pub fn link<T: Scalar>(self, g: T) -> T {
        match self {
            Self::Quadratic => g,
            Self::QuadraticNonneg => g.max(T::zero()),
            Self::Entropy => g.exp(),
        }
    }

    /// Convex conjugate `χ*`.
    #[inline]
    pub fn conjugate<T: Scalar>(self, g: T) -> T {
        match self {
            Self::Quadratic => g * g * T::half(),
            Self::QuadraticNonneg => {
                let p = g.max(T::zero());
                p * p * T::half()
            }
            Self::Entropy => g.exp(),
        }
    }

    /// `χ(γ)`, `+∞` outside the domain.
    #[inline]
    pub fn chi<T: Scalar>(self, gamma: T) -> T {
        match self {
            Self::Quadratic => gamma * gamma * T::half(),
            Self::QuadraticNonneg if gamma >= T::zero() => gamma * gamma * T::half(),
            Self::Entropy if gamma > T::zero() => gamma * (gamma.ln() - T::one()),
            Self::Entropy if gamma == T::zero() => T::zero(),
            _ => T::infinity(),
        }
    }

    /// Whether every weight this dispersion produces is nonnegative.
    pub fn nonnegative(self) -> bool {
        !matches!(self, Self::Quadratic)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Quadratic => "quadratic",
            Self::QuadraticNonneg => "quadratic-nonneg",
            Self::Entropy => "entropy",
        }
    }
}

/// `η_χ(g)`.
pub fn link_eval<T: Scalar>(chi: DispersionSpec, g: T) -> T {
    chi.link(g)
}

/// Bregman divergence `D_χ(x‖y)`.
pub fn bregman<T: Scalar>(chi: DispersionSpec, x: T, y: T) -> Result<T> {
    match chi {
        DispersionSpec::Quadratic => Ok((x - y) * (x - y) * T::half()),
        DispersionSpec::Entropy => {
            if !(x >= T::zero() && y > T::zero()) {
                return Err(Error::Invalid(format!(
                    "entropy divergence needs x >= 0 and y > 0, got x = {x}, y = {y}"
                )));
            }
            let xlog = if x == T::zero() { T::zero() } else { x * (x / y).ln() };
            Ok(xlog - x + y)
        }
        DispersionSpec::QuadraticNonneg => Err(Error::Invalid(
            "the divergence of the nonnegative quadratic dispersion is not defined".into(),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyKind {
    /// Hard caps `|d_j| ≤ 1/λ_j`; dual penalty `Σ|θ_j|/λ_j`.
    #[default]
    L1Scaled,
    /// `Σ λ_j² d_j² + (2σ²/n²) Σ χ(γ_i)`; dual ridge penalty `(σ²/2n) Σ θ_j²/λ_j²`.
    L2Scaled,
}

/// Penalty on imbalance. `sigma2` is only read by the l2-scaled kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    #[serde(default)]
    pub sigma2: f64,
}

impl PenaltySpec {
    pub fn l1() -> Self {
        Self {
            kind: PenaltyKind::L1Scaled,
            sigma2: 0.0,
        }
    }

    pub fn l2(sigma2: f64) -> Self {
        Self {
            kind: PenaltyKind::L2Scaled,
            sigma2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::Invalid(format!("sigma2 = {} must be finite and >= 0", self.sigma2)));
        }
        Ok(())
    }
}

/// Iteration controls for [`solve_dual`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Bound on the sup norm of the unit-step proximal gradient mapping.
    pub tolerance: f64,
    pub max_iter: usize,
    /// `|θ_j| · max_i |φ_ij|` beyond this flags unreachable exact constraints.
    pub divergence_bound: f64,
    /// Largest index `θ·φ` allowed inside `exp`.
    pub exp_cap: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_iter: 50_000,
            divergence_bound: 1e8,
            exp_cap: 700.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// Coefficients on exact-balance columns diverged.
    Infeasible,
    /// The entropy index hit the overflow cap.
    Overflow,
    /// No further decrease was possible before the tolerance was met.
    Stalled,
}

/// Dual coefficients together with the weights they imply.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualSolution<T> {
    pub theta: Vec<T>,
    pub weights: WeightVector<T>,
    pub objective_trace: Vec<T>,
    pub grad_norm: T,
    pub iterations: usize,
    pub converged: bool,
    pub status: SolveStatus,
}

/// `η(θ·φ(X_i))` on the arm's units, zero elsewhere.
pub fn implied_weights<T: Scalar>(
    fm: &FeatureMatrix<T>,
    treatment: &[bool],
    arm: Arm,
    chi: DispersionSpec,
    theta: &[T],
) -> Result<WeightVector<T>> {
    let idx = fm.values().matvec(theta);
    let values = idx
        .into_iter()
        .zip(treatment)
        .map(|(g, &t)| if arm.contains(t) { chi.link(g) } else { T::zero() })
        .collect();
    WeightVector::new(values, treatment, arm)
}

/// Solver settings as read from a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightingConfig {
    #[serde(default)]
    pub dispersion: DispersionSpec,
    #[serde(default)]
    pub penalty: PenaltyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Adds a `1e-12` ridge when an unpenalized quadratic system is singular.
    #[serde(default)]
    pub ridge_tiebreak: bool,
}

fn default_tolerance() -> f64 {
    SolverOptions::default().tolerance
}

fn default_max_iter() -> usize {
    SolverOptions::default().max_iter
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self {
            dispersion: DispersionSpec::Quadratic,
            penalty: PenaltyKind::L1Scaled,
            sigma2: None,
            tolerance: default_tolerance(),
            max_iter: default_max_iter(),
            ridge_tiebreak: false,
        }
    }
}

impl WeightingConfig {
    pub fn penalty_spec(&self) -> Result<PenaltySpec> {
        let spec = match self.penalty {
            PenaltyKind::L1Scaled => PenaltySpec::l1(),
            PenaltyKind::L2Scaled => PenaltySpec::l2(self.sigma2.ok_or_else(|| {
                Error::Invalid("the l2-scaled penalty needs sigma2".into())
            })?),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tolerance: self.tolerance,
            max_iter: self.max_iter,
            ..SolverOptions::default()
        }
    }
}

/// Fits weights for `arm`: the closed-form linear solve for quadratic
/// dispersion with the l2-scaled penalty, the proximal-gradient dual otherwise.
pub fn fit_weights<T: Scalar>(
    fm: &FeatureMatrix<T>,
    treatment: &[bool],
    arm: Arm,
    target: &BalanceTarget<T>,
    cfg: &WeightingConfig,
) -> Result<DualSolution<T>> {
    let pen = cfg.penalty_spec()?;
    if cfg.dispersion == DispersionSpec::Quadratic && pen.kind == PenaltyKind::L2Scaled {
        let opts = MinimaxOptions {
            arm,
            ridge_tiebreak: cfg.ridge_tiebreak,
        };
        return solve_minimax_l2(fm, treatment, target, pen.sigma2, &opts);
    }
    solve_dual(fm, treatment, arm, target, cfg.dispersion, &pen, &cfg.solver_options())
}
