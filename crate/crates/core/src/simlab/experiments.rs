//! Convergence and coverage experiments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_features, Arm, BasisSpec};
use crate::dual::{fit_weights, WeightingConfig};
use crate::error::{Error, Result};
use crate::estimators::{estimate_effect, normal_quantile, EstimandSpec, EstimateStatus, EstimationConfig, Oracle};
use crate::imbalance::BalanceTarget;
use crate::scalar::compensated_sum;

use super::{oracle_weights, DGPSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub dgp: DGPSpec,
    pub sizes: Vec<usize>,
    pub replications: usize,
    pub basis: BasisSpec,
    pub weighting: WeightingConfig,
    #[serde(default)]
    pub arm: Arm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageConfig {
    pub dgp: DGPSpec,
    pub replications: usize,
    pub basis: BasisSpec,
    pub estimation: EstimationConfig,
    /// Interval levels evaluated on the same replications; the estimation
    /// config's own level is ignored.
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
}

fn default_levels() -> Vec<f64> {
    vec![0.95]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeSummary {
    pub n: usize,
    pub reps_used: usize,
    /// Replications dropped because the weight solver did not converge.
    pub excluded: usize,
    /// Mean over replications of `sqrt(mean_{arm} (γ̂_i − γ^ipw_i)²)`.
    pub rmse_weights: f64,
    pub rmse_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelCoverage {
    pub level: f64,
    /// Fraction of non-degenerate replications whose interval covers the truth.
    pub coverage: Option<f64>,
    pub hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub kind: String,
    pub replications: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub per_size: Vec<SizeSummary>,
    /// Whether the weight RMSE strictly decreases along `sizes`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strictly_decreasing: Option<bool>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub coverage: Vec<LevelCoverage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub estimates: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub variances: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_gamma_rms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_variance_estimate: Option<f64>,
    /// Largest `|imbalance + noise + sampling − total|` over replications.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_decomposition_residual: Option<f64>,
    pub degenerate: usize,
    pub excluded: usize,
}

impl SimResult {
    fn empty(kind: &str, replications: usize) -> Self {
        Self {
            kind: kind.into(),
            replications,
            per_size: Vec::new(),
            strictly_decreasing: None,
            coverage: Vec::new(),
            truth: None,
            estimates: Vec::new(),
            variances: Vec::new(),
            bias: None,
            variance: None,
            mean_gamma_rms: None,
            mean_variance_estimate: None,
            max_decomposition_residual: None,
            degenerate: 0,
            excluded: 0,
        }
    }

    /// Plain-text summary table.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} experiment, {} replications\n", self.kind, self.replications);
        if !self.per_size.is_empty() {
            s += &format!("{:>8} {:>6} {:>9} {:>14} {:>12}\n", "n", "used", "excluded", "rmse(weights)", "sd");
            for r in &self.per_size {
                s += &format!(
                    "{:>8} {:>6} {:>9} {:>14.6} {:>12.6}\n",
                    r.n, r.reps_used, r.excluded, r.rmse_weights, r.rmse_sd
                );
            }
        }
        if let Some(d) = self.strictly_decreasing {
            s += &format!("strictly decreasing: {d}\n");
        }
        for c in &self.coverage {
            match c.coverage {
                Some(v) => s += &format!("coverage at {:.3}: {:.4} ({} hits)\n", c.level, v, c.hits),
                None => s += &format!("coverage at {:.3}: undefined\n", c.level),
            }
        }
        if let (Some(t), Some(b)) = (self.truth, self.bias) {
            s += &format!("truth {t:.6}, bias {b:.6}\n");
        }
        if self.degenerate > 0 || self.excluded > 0 {
            s += &format!("degenerate {}, excluded {}\n", self.degenerate, self.excluded);
        }
        s
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = compensated_sum(v.iter().copied()) / v.len() as f64;
    let var = compensated_sum(v.iter().map(|x| (x - m) * (x - m))) / (v.len().max(2) - 1) as f64;
    (m, var.sqrt())
}

/// RMSE of fitted weights against `1/e(X)` for each sample size.
pub fn convergence_experiment(cfg: &ConvergenceConfig) -> Result<SimResult> {
    if cfg.replications == 0 || cfg.sizes.is_empty() {
        return Err(Error::Invalid("convergence experiment needs replications >= 1 and a size grid".into()));
    }
    if cfg.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("sizes must be strictly increasing".into()));
    }
    let dgp = cfg.dgp.compile()?;
    cfg.weighting.penalty_spec()?;
    let mut res = SimResult::empty("convergence", cfg.replications);
    for (s, &n) in cfg.sizes.iter().enumerate() {
        let reps = (0..cfg.replications)
            .into_par_iter()
            .map(|r| -> Result<Option<f64>> {
                let data = dgp.sample(n, ((s as u64) << 32) | r as u64)?;
                let t = &data.table;
                let fm = build_features(t, &cfg.basis)?;
                let target = BalanceTarget::full_sample(&fm);
                let sol = fit_weights(&fm, t.treatment(), cfg.arm, &target, &cfg.weighting)?;
                if !sol.converged {
                    return Ok(None);
                }
                let oracle = oracle_weights(&data.e, t.treatment(), cfg.arm)?;
                let idx = t.arm_indices(cfg.arm);
                let ss = compensated_sum(idx.iter().map(|&i| (sol.weights.values()[i] - oracle.values()[i]).powi(2)));
                Ok(Some((ss / idx.len() as f64).sqrt()))
            })
            .collect::<Result<Vec<_>>>()?;
        let used: Vec<f64> = reps.iter().flatten().copied().collect();
        let (m, sd) = mean_sd(&used);
        res.excluded += cfg.replications - used.len();
        res.per_size.push(SizeSummary {
            n,
            reps_used: used.len(),
            excluded: cfg.replications - used.len(),
            rmse_weights: m,
            rmse_sd: sd,
        });
    }
    res.strictly_decreasing = Some(res.per_size.windows(2).all(|w| w[1].rmse_weights < w[0].rmse_weights));
    Ok(res)
}

struct Rep {
    point: f64,
    variance: f64,
    gamma_rms: f64,
    residual: f64,
}

/// Coverage of Wald intervals for the true treated mean, control mean or ATE.
pub fn coverage_experiment(cfg: &CoverageConfig) -> Result<SimResult> {
    if cfg.replications < 100 {
        return Err(Error::Invalid(format!(
            "coverage experiment needs at least 100 replications, got {}",
            cfg.replications
        )));
    }
    let z: Vec<f64> = cfg.levels.iter().map(|&l| normal_quantile(l)).collect::<Result<_>>()?;
    let dgp = cfg.dgp.compile()?;
    let truth = match cfg.estimation.estimand {
        EstimandSpec::TreatedMean => dgp.mu1(),
        EstimandSpec::ControlMean => dgp.mu0(),
        EstimandSpec::Ate => dgp.mu1() - dgp.mu0(),
        _ => {
            return Err(Error::Invalid(
                "coverage experiments support treated-mean, control-mean and ate".into(),
            ))
        }
    };
    let n = cfg.dgp.n;
    let reps = (0..cfg.replications)
        .into_par_iter()
        .map(|r| -> Result<Option<Rep>> {
            let data = dgp.sample(n, r as u64)?;
            let fm = build_features(&data.table, &cfg.basis)?;
            let oracle = Oracle {
                m1: data.m1.clone(),
                m0: data.m0.clone(),
                mu1: data.mu1,
                mu0: data.mu0,
            };
            let est = estimate_effect(&data.table, &fm, &cfg.estimation, None, Some(&oracle))?;
            if !est.converged() {
                return Ok(None);
            }
            let residual = est
                .error_decomposition
                .map_or(0.0, |d| (d.imbalance + d.noise + d.sampling - d.total).abs());
            let variance = if est.status == EstimateStatus::DegenerateInterval { 0.0 } else { est.variance };
            Ok(Some(Rep {
                point: est.point,
                variance,
                gamma_rms: est.gamma_rms,
                residual,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let used: Vec<&Rep> = reps.iter().flatten().collect();
    let mut res = SimResult::empty("coverage", cfg.replications);
    res.excluded = cfg.replications - used.len();
    res.degenerate = used.iter().filter(|r| r.variance == 0.0).count();
    let live: Vec<&&Rep> = used.iter().filter(|r| r.variance > 0.0).collect();
    for (&level, &zq) in cfg.levels.iter().zip(&z) {
        let hits = live
            .iter()
            .filter(|r| (r.point - truth).abs() <= zq * r.variance.sqrt())
            .count();
        res.coverage.push(LevelCoverage {
            level,
            coverage: (!live.is_empty()).then(|| hits as f64 / live.len() as f64),
            hits,
        });
    }
    res.truth = Some(truth);
    res.estimates = used.iter().map(|r| r.point).collect();
    res.variances = used.iter().map(|r| r.variance).collect();
    let (m, sd) = mean_sd(&res.estimates);
    res.bias = Some(m - truth);
    res.variance = Some(sd * sd);
    res.mean_gamma_rms = Some(mean_sd(&used.iter().map(|r| r.gamma_rms).collect::<Vec<_>>()).0);
    res.mean_variance_estimate = Some(mean_sd(&res.variances).0);
    res.max_decomposition_residual = Some(used.iter().fold(0.0, |a, r| a.max(r.residual)));
    Ok(res)
}
