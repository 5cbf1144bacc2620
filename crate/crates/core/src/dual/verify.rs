//! Runtime check that a dual solution and a primal solution agree.

use serde::Serialize;

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};
use crate::imbalance::{BalanceTarget, WeightVector};
use crate::scalar::Scalar;

use super::{primal_objective, DispersionSpec, DualSolution, PenaltySpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityReport {
    /// `max_i |γ_i − η(θ·φ(X_i))|` over the weighted arm, with `γ` the primal weights.
    pub link_discrepancy: f64,
    pub primal_at_dual: f64,
    pub primal_at_reference: f64,
    /// `max(0, primal_at_dual − primal_at_reference)`, relative to `max(1, |reference|)`.
    pub objective_excess: f64,
    pub max_discrepancy: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Checks that the primal weights equal the link applied to the dual index,
/// and that the dual-implied weights are no worse for the primal objective.
pub fn verify_duality<T: Scalar>(
    fm: &FeatureMatrix<T>,
    treatment: &[bool],
    target: &BalanceTarget<T>,
    chi: DispersionSpec,
    pen: &PenaltySpec,
    primal_weights: &WeightVector<T>,
    dual: &DualSolution<T>,
    tolerance: f64,
) -> Result<DualityReport> {
    if primal_weights.len() != fm.n() || dual.theta.len() != fm.p() {
        return Err(Error::Dimension("primal and dual solutions do not match the features".into()));
    }
    let arm = dual.weights.arm();
    let index = fm.values().matvec(&dual.theta);
    let link_discrepancy = index
        .iter()
        .zip(primal_weights.values())
        .zip(treatment)
        .filter(|(_, &t)| arm.contains(t))
        .fold(0.0f64, |m, ((&g, &w), _)| m.max((chi.link(g) - w).abs().to_f64_lossy()));
    let at_dual = primal_objective(fm, treatment, target, &dual.weights, chi, pen)?.to_f64_lossy();
    let at_ref = primal_objective(fm, treatment, target, primal_weights, chi, pen)?.to_f64_lossy();
    let objective_excess = if at_dual.is_infinite() && at_dual > 0.0 {
        f64::INFINITY
    } else if at_ref.is_infinite() {
        0.0
    } else {
        ((at_dual - at_ref) / at_ref.abs().max(1.0)).max(0.0)
    };
    let max_discrepancy = link_discrepancy.max(objective_excess);
    Ok(DualityReport {
        link_discrepancy,
        primal_at_dual: at_dual,
        primal_at_reference: at_ref,
        objective_excess,
        max_discrepancy,
        tolerance,
        pass: max_discrepancy <= tolerance,
    })
}
