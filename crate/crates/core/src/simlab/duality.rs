//! Randomized duality checks: dual solutions against direct primal solves.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Arm, FeatureMatrix, INTERCEPT_LABEL};
use crate::dual::{solve_dual, solve_primal_direct, verify_duality, DispersionSpec, PenaltySpec, SolverOptions};
use crate::error::{Error, Result};
use crate::imbalance::{feature_imbalance, BalanceTarget, WeightVector};
use crate::linalg::Matrix;

use super::rng_for;

/// A dispersion together with a penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualityPair {
    pub dispersion: DispersionSpec,
    pub penalty: PenaltySpec,
}

impl DualityPair {
    pub fn name(&self) -> String {
        let pen = match self.penalty.kind {
            crate::dual::PenaltyKind::L1Scaled => "l1".to_string(),
            crate::dual::PenaltyKind::L2Scaled => format!("l2(sigma2={})", self.penalty.sigma2),
        };
        format!("{}/{pen}", self.dispersion.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualityCheckConfig {
    /// Instances per pair.
    pub instances: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub p_min: usize,
    pub p_max: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub pairs: Vec<DualityPair>,
    pub solver: SolverOptions,
}

impl Default for DualityCheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            n_min: 20,
            n_max: 60,
            p_min: 2,
            p_max: 12,
            tolerance: 1e-6,
            seed: 0,
            pairs: [DispersionSpec::Quadratic, DispersionSpec::Entropy, DispersionSpec::QuadraticNonneg]
                .into_iter()
                .map(|dispersion| DualityPair {
                    dispersion,
                    penalty: PenaltySpec::l1(),
                })
                .collect(),
            solver: SolverOptions::default(),
        }
    }
}

impl DualityCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.pairs.is_empty() {
            return Err(Error::Invalid("duality check needs at least one instance and one pair".into()));
        }
        if self.n_min < 4 || self.n_min > self.n_max || self.p_min < 2 || self.p_min > self.p_max {
            return Err(Error::Invalid("duality check ranges need 4 <= n_min <= n_max and 2 <= p_min <= p_max".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Invalid(format!("tolerance {} must be >= 0", self.tolerance)));
        }
        for pair in &self.pairs {
            pair.penalty.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualityInstance {
    pub fm: FeatureMatrix<f64>,
    pub treatment: Vec<bool>,
    pub target: BalanceTarget<f64>,
}

/// Gaussian covariates plus an intercept, logistic treatment, full-sample
/// target. The intercept is balanced exactly; every other column gets a cap
/// between 0.3 and 0.7 times its imbalance under uniform weights.
pub fn random_duality_instance(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Result<DualityInstance> {
    loop {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                std::iter::once(1.0)
                    .chain((1..p).map(|_| StandardNormal.sample(rng)))
                    .collect()
            })
            .collect();
        let treatment: Vec<bool> = rows
            .iter()
            .map(|r| rng.gen::<f64>() < 1.0 / (1.0 + (-0.5 * r[1]).exp()))
            .collect();
        let n1 = treatment.iter().filter(|&&t| t).count();
        if n1 < 2 || n1 > n - 2 {
            continue;
        }
        let labels = std::iter::once(INTERCEPT_LABEL.to_string())
            .chain((1..p).map(|j| format!("x{j}")))
            .collect();
        let raw = FeatureMatrix::new(Matrix::from_rows(&rows), vec![1.0; p], labels, Some(0))?;
        let target = BalanceTarget::full_sample(&raw);
        let uniform = WeightVector::uniform(&treatment, Arm::Treated)?;
        let d = feature_imbalance(&raw, &treatment, &uniform, &target)?;
        let mut scales = vec![f64::INFINITY; p];
        for j in 1..p {
            let cap = rng.gen_range(0.3..0.7) * d[j].abs().max(1e-3);
            scales[j] = 1.0 / cap;
        }
        let fm = raw.with_scales(scales)?;
        return Ok(DualityInstance { fm, treatment, target });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityRow {
    pub pair: String,
    pub instance: usize,
    pub n: usize,
    pub p: usize,
    pub link_discrepancy: f64,
    pub objective_excess: f64,
    pub max_discrepancy: f64,
    pub pass: bool,
    pub dual_converged: bool,
    pub dual_iterations: usize,
    pub primal_converged: bool,
    /// Instances redrawn because the primal problem was infeasible.
    pub redraws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairSummary {
    pub pair: String,
    pub instances: usize,
    pub failures: usize,
    pub max_discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityCheckReport {
    pub tolerance: f64,
    pub summary: Vec<PairSummary>,
    pub rows: Vec<DualityRow>,
    pub all_pass: bool,
}

impl DualityCheckReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<28} {:>9} {:>8} {:>14}\n", "pair", "instances", "failures", "max discrep.");
        for p in &self.summary {
            s += &format!("{:<28} {:>9} {:>8} {:>14.3e}\n", p.pair, p.instances, p.failures, p.max_discrepancy);
        }
        s += &format!("tolerance {:e}: {}\n", self.tolerance, if self.all_pass { "pass" } else { "FAIL" });
        s
    }
}

const MAX_REDRAWS: usize = 50;

/// Runs every pair on `instances` random instances and compares the dual
/// solution with the direct primal solve.
pub fn check_duality(cfg: &DualityCheckConfig) -> Result<DualityCheckReport> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.pairs.len())
        .flat_map(|a| (0..cfg.instances).map(move |k| (a, k)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(a, k)| run_one(cfg, a, k))
        .collect::<Result<Vec<_>>>()?;
    let summary: Vec<PairSummary> = cfg
        .pairs
        .iter()
        .map(|pair| {
            let name = pair.name();
            let mine: Vec<&DualityRow> = rows.iter().filter(|r| r.pair == name).collect();
            PairSummary {
                pair: name,
                instances: mine.len(),
                failures: mine.iter().filter(|r| !r.pass).count(),
                max_discrepancy: mine.iter().fold(0.0, |m, r| m.max(r.max_discrepancy)),
            }
        })
        .collect();
    Ok(DualityCheckReport {
        tolerance: cfg.tolerance,
        all_pass: rows.iter().all(|r| r.pass),
        summary,
        rows,
    })
}

fn run_one(cfg: &DualityCheckConfig, a: usize, k: usize) -> Result<DualityRow> {
    let pair = cfg.pairs[a];
    for redraw in 0..MAX_REDRAWS {
        let mut rng = rng_for(cfg.seed, ((a as u64) << 40) | ((k as u64) << 8) | redraw as u64);
        let n = rng.gen_range(cfg.n_min..=cfg.n_max);
        let p = rng.gen_range(cfg.p_min..=cfg.p_max);
        let inst = random_duality_instance(&mut rng, n, p)?;
        let primal = match solve_primal_direct(&inst.fm, &inst.treatment, Arm::Treated, &inst.target, pair.dispersion, &pair.penalty) {
            Ok(s) => s,
            Err(Error::Infeasible(_)) => continue,
            Err(e) => return Err(e),
        };
        let dual = solve_dual(&inst.fm, &inst.treatment, Arm::Treated, &inst.target, pair.dispersion, &pair.penalty, &cfg.solver)?;
        let r = verify_duality(&inst.fm, &inst.treatment, &inst.target, pair.dispersion, &pair.penalty, &primal.weights, &dual, cfg.tolerance)?;
        return Ok(DualityRow {
            pair: pair.name(),
            instance: k,
            n,
            p,
            link_discrepancy: r.link_discrepancy,
            objective_excess: r.objective_excess,
            max_discrepancy: r.max_discrepancy,
            pass: r.pass,
            dual_converged: dual.converged,
            dual_iterations: dual.iterations,
            primal_converged: primal.converged,
            redraws: redraw,
        });
    }
    Err(Error::Infeasible(format!("no feasible instance after {MAX_REDRAWS} draws")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes_and_is_deterministic() {
        let cfg = DualityCheckConfig {
            instances: 5,
            ..DualityCheckConfig::default()
        };
        let a = check_duality(&cfg).unwrap();
        assert!(a.all_pass, "{}", a.to_text());
        assert_eq!(a.rows.len(), 15);
        let b = check_duality(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_tolerance_fails() {
        let cfg = DualityCheckConfig {
            instances: 3,
            tolerance: 0.0,
            pairs: vec![DualityPair {
                dispersion: DispersionSpec::Entropy,
                penalty: PenaltySpec::l1(),
            }],
            ..DualityCheckConfig::default()
        };
        assert!(!check_duality(&cfg).unwrap().all_pass);
    }
}
