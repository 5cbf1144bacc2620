//! Weighting and augmented estimators, cross-fit outcome models, Wald
//! intervals and balance targets for the supported estimands.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{Arm, FeatureMatrix, ObservationTable};
use crate::dual::{fit_weights, WeightingConfig};
use crate::error::{Error, Result};
use crate::imbalance::{effective_sample_size, BalanceTarget, ImbalanceReport, TargetProvenance, WeightVector};
use crate::linalg::{Cholesky, Matrix};
use crate::scalar::{compensated_sum, Scalar};

fn outcomes<T: Scalar>(table: &ObservationTable<T>) -> Result<&[T]> {
    table.outcome().ok_or(Error::MissingOutcomes)
}

fn check_weights<T: Scalar>(table: &ObservationTable<T>, g: &WeightVector<T>) -> Result<()> {
    if g.len() != table.n() {
        return Err(Error::Dimension(format!("{} weights for {} units", g.len(), table.n())));
    }
    Ok(())
}

/// `(1/n) Σ A_i γ_i Y_i` over the weights' arm.
pub fn ipw_estimate<T: Scalar>(table: &ObservationTable<T>, g: &WeightVector<T>) -> Result<T> {
    check_weights(table, g)?;
    let y = outcomes(table)?;
    let arm = g.arm();
    let n = T::from_usize_lossy(table.n());
    Ok(compensated_sum(
        (0..table.n())
            .filter(|&i| arm.contains(table.treatment()[i]))
            .map(|i| g.values()[i] * y[i]),
    ) / n)
}

/// Rescales so that `(1/n) Σ γ_i = 1`.
pub fn hajek_normalize<T: Scalar>(g: &WeightVector<T>, treatment: &[bool]) -> Result<WeightVector<T>> {
    let mean = g.mean();
    if !(mean > T::zero()) {
        return Err(Error::ZeroWeights);
    }
    if mean == T::one() {
        return Ok(g.clone());
    }
    WeightVector::new(g.values().iter().map(|&v| v / mean).collect(), treatment, g.arm())
}

/// Settings of the cross-fit ridge outcome model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeConfig {
    pub enabled: bool,
    pub folds: usize,
    pub penalty: f64,
    pub seed: u64,
}

impl Default for OutcomeConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            folds: 5,
            penalty: 1.0,
            seed: 0,
        }
    }
}

/// Out-of-fold predictions `m̂^{(−i)}(X_i)` for every unit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeModel<T> {
    pub arm: Arm,
    pub folds: Vec<usize>,
    pub k: usize,
    pub penalty: f64,
    /// Per fold: intercept followed by one coefficient per feature column.
    pub coefficients: Vec<Vec<f64>>,
    pub predictions: Vec<T>,
    #[serde(skip)]
    imputes_zero: bool,
}

impl<T: Scalar> OutcomeModel<T> {
    /// `m̂ ≡ 0`.
    pub fn zero(n: usize, arm: Arm) -> Self {
        Self {
            arm,
            folds: vec![0; n],
            k: 1,
            penalty: 0.0,
            coefficients: Vec::new(),
            predictions: vec![T::zero(); n],
            imputes_zero: true,
        }
    }

    /// Fixed predictions, e.g. the true conditional mean in a simulation.
    pub fn from_predictions(predictions: Vec<T>, arm: Arm) -> Self {
        let n = predictions.len();
        Self {
            arm,
            folds: vec![0; n],
            k: 1,
            penalty: 0.0,
            coefficients: Vec::new(),
            predictions,
            imputes_zero: false,
        }
    }

    /// Fold-averaged prediction at a feature vector; with a linear model this
    /// is also its average over any population with feature means `phi`.
    pub fn predict_features(&self, phi: &[T]) -> Result<T> {
        if self.imputes_zero {
            return Ok(T::zero());
        }
        if self.coefficients.is_empty() {
            return Err(Error::Invalid("outcome model has fixed predictions only".into()));
        }
        let k = self.coefficients.len() as f64;
        let v: f64 = self
            .coefficients
            .iter()
            .map(|c| c[0] + c[1..].iter().zip(phi).map(|(b, x)| b * x.to_f64_lossy()).sum::<f64>())
            .sum::<f64>()
            / k;
        Ok(T::lit(v))
    }
}

/// Cross-fit ridge regression of `Y` on `Φ` among the arm's units.
///
/// Units are shuffled into `k` folds by `seed`; the model predicting a unit
/// in fold `f` is fit on the arm's units outside `f`. Features are centered
/// within each training set and the intercept is not penalized.
pub fn fit_crossfit_ridge<T: Scalar>(
    table: &ObservationTable<T>,
    fm: &FeatureMatrix<T>,
    k: usize,
    penalty: f64,
    arm: Arm,
    seed: u64,
) -> Result<OutcomeModel<T>> {
    let y = outcomes(table)?;
    let n = table.n();
    if fm.n() != n {
        return Err(Error::Dimension("features and table disagree on n".into()));
    }
    if k < 2 {
        return Err(Error::Invalid(format!("cross-fitting needs k >= 2 folds, got {k}")));
    }
    if !(penalty >= 0.0 && penalty.is_finite()) {
        return Err(Error::Invalid(format!("ridge penalty {penalty} must be finite and >= 0")));
    }
    if table.arm_size(arm) < k {
        return Err(Error::Invalid(format!(
            "{} arm has {} units, fewer than the {k} folds",
            arm.name(),
            table.arm_size(arm)
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    // Arm units are dealt round-robin first so every fold gets its share.
    let (in_arm, rest): (Vec<usize>, Vec<usize>) = order.into_iter().partition(|&i| arm.contains(table.treatment()[i]));
    for (r, &i) in in_arm.iter().enumerate() {
        folds[i] = r % k;
    }
    for (r, &i) in rest.iter().enumerate() {
        folds[i] = r % k;
    }

    let cols: Vec<usize> = (0..fm.p()).filter(|&j| Some(j) != fm.intercept()).collect();
    let x = fm.values();
    let mut coefficients = Vec::with_capacity(k);
    for f in 0..k {
        let train: Vec<usize> = in_arm.iter().copied().filter(|&i| folds[i] != f).collect();
        coefficients.push(ridge_fit(x, y, &train, &cols, fm.p(), penalty, fm.labels())?);
    }
    let predictions = (0..n)
        .map(|i| {
            let c = &coefficients[folds[i]];
            let v = c[0] + x.row(i).iter().zip(&c[1..]).map(|(a, b)| a.to_f64_lossy() * b).sum::<f64>();
            T::lit(v)
        })
        .collect();
    Ok(OutcomeModel {
        arm,
        folds,
        k,
        penalty,
        coefficients,
        predictions,
        imputes_zero: false,
    })
}

fn ridge_fit<T: Scalar>(
    x: &Matrix<T>,
    y: &[T],
    train: &[usize],
    cols: &[usize],
    p: usize,
    penalty: f64,
    labels: &[String],
) -> Result<Vec<f64>> {
    let m = train.len() as f64;
    let q = cols.len();
    let xbar: Vec<f64> = cols
        .iter()
        .map(|&j| train.iter().map(|&i| x[(i, j)].to_f64_lossy()).sum::<f64>() / m)
        .collect();
    let ybar = train.iter().map(|&i| y[i].to_f64_lossy()).sum::<f64>() / m;
    let mut gram = Matrix::zeros(q, q);
    let mut rhs = vec![0.0; q];
    for &i in train {
        let xc: Vec<f64> = cols.iter().zip(&xbar).map(|(&j, xb)| x[(i, j)].to_f64_lossy() - xb).collect();
        let yc = y[i].to_f64_lossy() - ybar;
        for a in 0..q {
            rhs[a] += xc[a] * yc;
            for b in 0..=a {
                gram[(a, b)] += xc[a] * xc[b];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
        gram[(a, a)] += penalty;
    }
    let beta = if q == 0 {
        Vec::new()
    } else {
        Cholesky::new(&gram, 1e4 * f64::EPSILON)
            .map_err(|e| Error::Singular {
                columns: vec![labels[cols[e.column]].clone()],
                hint: "; outcome regression design is rank deficient, use a positive ridge penalty".into(),
            })?
            .solve(&rhs)
    };
    let mut out = vec![0.0; p + 1];
    let mut intercept = ybar;
    for (a, &j) in cols.iter().enumerate() {
        out[j + 1] = beta[a];
        intercept -= beta[a] * xbar[a];
    }
    out[0] = intercept;
    Ok(out)
}

/// The imputation term `(1/n) Σ {ω_i m̂_i − A_i γ_i m̂_i}`, with `ω ≡ 1`.
pub fn imputation_correction<T: Scalar>(
    table: &ObservationTable<T>,
    g: &WeightVector<T>,
    m: &OutcomeModel<T>,
) -> Result<T> {
    correction_against(table, g, m, &Imputation::Sample(vec![T::one(); table.n()]))
}

fn correction_against<T: Scalar>(
    table: &ObservationTable<T>,
    g: &WeightVector<T>,
    m: &OutcomeModel<T>,
    target: &Imputation<T>,
) -> Result<T> {
    check_weights(table, g)?;
    if m.predictions.len() != table.n() {
        return Err(Error::Dimension("outcome model and table disagree on n".into()));
    }
    let n = T::from_usize_lossy(table.n());
    let arm = g.arm();
    let imputed = match target {
        Imputation::Sample(omega) => compensated_sum(omega.iter().zip(&m.predictions).map(|(&w, &p)| w * p)) / n,
        Imputation::Means(b) => m.predict_features(b)?,
    };
    let weighted = compensated_sum(
        (0..table.n())
            .filter(|&i| arm.contains(table.treatment()[i]))
            .map(|i| g.values()[i] * m.predictions[i]),
    ) / n;
    Ok(imputed - weighted)
}

/// `(1/n) Σ A_i γ_i Y_i + (1/n) Σ {m̂^{(−i)}(X_i) − A_i γ_i m̂^{(−i)}(X_i)}`.
pub fn aipw_estimate<T: Scalar>(table: &ObservationTable<T>, g: &WeightVector<T>, m: &OutcomeModel<T>) -> Result<T> {
    Ok(ipw_estimate(table, g)? + imputation_correction(table, g, m)?)
}

/// `(1/n²) Σ A_i γ_i² (Y_i − m̂^{(−i)}(X_i))²` for one arm.
pub fn variance_estimate<T: Scalar>(table: &ObservationTable<T>, g: &WeightVector<T>, m: &OutcomeModel<T>) -> Result<T> {
    check_weights(table, g)?;
    let y = outcomes(table)?;
    let n = T::from_usize_lossy(table.n());
    let arm = g.arm();
    Ok(compensated_sum((0..table.n()).filter(|&i| arm.contains(table.treatment()[i])).map(|i| {
        let r = y[i] - m.predictions[i];
        g.values()[i] * g.values()[i] * r * r
    })) / (n * n))
}

/// `z_{α/2}` for a two-sided interval at `level`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Invalid(format!("confidence level {level} must lie in (0, 1)")));
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(std.inverse_cdf(0.5 + level / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateStatus {
    Ok,
    /// `V̂ = 0`; no interval is reported.
    DegenerateInterval,
}

/// Per-arm pieces of an estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmComponent {
    pub arm: Arm,
    pub sign: f64,
    pub weighting: f64,
    pub correction: f64,
    pub variance: f64,
    pub converged: bool,
}

/// The three terms of the augmented error display; they sum to
/// `estimate − truth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorDecomposition {
    pub imbalance: f64,
    pub noise: f64,
    pub sampling: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectEstimate {
    pub estimand: EstimandSpec,
    pub point: f64,
    pub variance: f64,
    pub ci: Option<[f64; 2]>,
    pub level: f64,
    pub gamma_rms: f64,
    pub ess: BTreeMap<String, f64>,
    pub imbalance_before: BTreeMap<String, ImbalanceReport>,
    pub imbalance_after: BTreeMap<String, ImbalanceReport>,
    pub status: EstimateStatus,
    pub target: TargetProvenance,
    pub components: Vec<ArmComponent>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_decomposition: Option<ErrorDecomposition>,
}

impl EffectEstimate {
    pub fn converged(&self) -> bool {
        self.components.iter().all(|c| c.converged)
    }
}

/// Wald interval for a single arm's treated- or control-mean estimate.
pub fn wald_ci<T: Scalar>(
    table: &ObservationTable<T>,
    g: &WeightVector<T>,
    m: &OutcomeModel<T>,
    level: f64,
) -> Result<EffectEstimate> {
    let estimand = match g.arm() {
        Arm::Treated => EstimandSpec::TreatedMean,
        Arm::Control => EstimandSpec::ControlMean,
    };
    let target = EstimandTarget {
        balance: BalanceTarget::new(Vec::new(), TargetProvenance::FullSample),
        imputation: Imputation::Sample(vec![T::one(); table.n()]),
    };
    let fits = [ArmFit {
        sign: 1.0,
        weights: g.clone(),
        model: m.clone(),
        converged: true,
    }];
    assemble(table, estimand, &target, &fits, level)
}

struct ArmFit<T> {
    sign: f64,
    weights: WeightVector<T>,
    model: OutcomeModel<T>,
    converged: bool,
}

fn assemble<T: Scalar>(
    table: &ObservationTable<T>,
    estimand: EstimandSpec,
    target: &EstimandTarget<T>,
    fits: &[ArmFit<T>],
    level: f64,
) -> Result<EffectEstimate> {
    let z = normal_quantile(level)?;
    let mut point = 0.0;
    let mut variance = 0.0;
    let mut ss = 0.0;
    let mut ess = BTreeMap::new();
    let mut components = Vec::new();
    for f in fits {
        let weighting = ipw_estimate(table, &f.weights)?.to_f64_lossy();
        let correction = correction_against(table, &f.weights, &f.model, &target.imputation)?.to_f64_lossy();
        let v = variance_estimate(table, &f.weights, &f.model)?.to_f64_lossy();
        point += f.sign * (weighting + correction);
        variance += v;
        ss += f.weights.values().iter().map(|w| w.to_f64_lossy().powi(2)).sum::<f64>();
        ess.insert(
            f.weights.arm().name().to_string(),
            effective_sample_size(&f.weights).map_or(0.0, |e| e.to_f64_lossy()),
        );
        components.push(ArmComponent {
            arm: f.weights.arm(),
            sign: f.sign,
            weighting,
            correction,
            variance: v,
            converged: f.converged,
        });
    }
    let (ci, status) = if variance > 0.0 {
        let h = z * variance.sqrt();
        (Some([point - h, point + h]), EstimateStatus::Ok)
    } else {
        (None, EstimateStatus::DegenerateInterval)
    };
    Ok(EffectEstimate {
        estimand,
        point,
        variance,
        ci,
        level,
        gamma_rms: (ss / table.n() as f64).sqrt(),
        ess,
        imbalance_before: BTreeMap::new(),
        imbalance_after: BTreeMap::new(),
        status,
        target: target.balance.provenance.clone(),
        components,
        error_decomposition: None,
    })
}

/// Splits `estimate − truth` for one arm into imbalance in `δm = m̂ − m`,
/// weighted noise and sampling variation, given the true conditional mean
/// `oracle_m` at every unit and the population mean `mu`.
pub fn error_decomposition<T: Scalar>(
    table: &ObservationTable<T>,
    g: &WeightVector<T>,
    m: &OutcomeModel<T>,
    oracle_m: &[T],
    mu: T,
) -> Result<ErrorDecomposition> {
    check_weights(table, g)?;
    let y = outcomes(table)?;
    let n = table.n();
    if oracle_m.len() != n || m.predictions.len() != n {
        return Err(Error::Dimension("oracle, model and table disagree on n".into()));
    }
    let nf = T::from_usize_lossy(n);
    let arm = g.arm();
    let on = |i: usize| arm.contains(table.treatment()[i]);
    let dm: Vec<T> = (0..n).map(|i| m.predictions[i] - oracle_m[i]).collect();
    let imbalance = compensated_sum(dm.iter().copied()) / nf
        - compensated_sum((0..n).filter(|&i| on(i)).map(|i| g.values()[i] * dm[i])) / nf;
    let noise = compensated_sum((0..n).filter(|&i| on(i)).map(|i| g.values()[i] * (y[i] - oracle_m[i]))) / nf;
    let sampling = compensated_sum(oracle_m.iter().copied()) / nf - mu;
    let total = aipw_estimate(table, g, m)? - mu;
    Ok(ErrorDecomposition {
        imbalance: imbalance.to_f64_lossy(),
        noise: noise.to_f64_lossy(),
        sampling: sampling.to_f64_lossy(),
        total: total.to_f64_lossy(),
    })
}

/// The quantity being estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EstimandSpec {
    TreatedMean,
    ControlMean,
    Ate,
    Att,
    /// Average effect over the covariate distribution of an external table.
    TargetPopulationMean { data: String },
    /// Effect at `x0`, smoothed by a Gaussian of sd `bandwidth` in covariate space.
    CateAtPoint {
        x0: Vec<f64>,
        bandwidth: f64,
        #[serde(default = "default_draws")]
        draws: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_draws() -> usize {
    10_000
}

impl EstimandSpec {
    pub fn validate(&self) -> Result<()> {
        if let Self::CateAtPoint { bandwidth, draws, x0, .. } = self {
            if !(*bandwidth > 0.0 && bandwidth.is_finite()) {
                return Err(Error::Invalid(format!("cate bandwidth must be positive, got {bandwidth}")));
            }
            if *draws < 1000 {
                return Err(Error::Invalid(format!("cate needs at least 1000 draws, got {draws}")));
            }
            if x0.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid("cate point must be finite".into()));
            }
        }
        Ok(())
    }

    /// Arms entering the estimand and their signs.
    pub fn arms(&self) -> Vec<(Arm, f64)> {
        match self {
            Self::TreatedMean => vec![(Arm::Treated, 1.0)],
            Self::ControlMean => vec![(Arm::Control, 1.0)],
            _ => vec![(Arm::Treated, 1.0), (Arm::Control, -1.0)],
        }
    }
}

/// How the imputation term averages the outcome model.
#[derive(Debug, Clone, PartialEq)]
pub enum Imputation<T> {
    /// `(1/n) Σ ω_i m̂^{(−i)}(X_i)` over the study sample.
    Sample(Vec<T>),
    /// The fold-averaged model at target feature means.
    Means(Vec<T>),
}

/// Balance target together with the matching imputation rule.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimandTarget<T> {
    pub balance: BalanceTarget<T>,
    pub imputation: Imputation<T>,
}

/// Feature means the weights must reproduce for `spec`. `external` is the
/// target table of a target-population estimand.
pub fn build_balance_target<T: Scalar>(
    spec: &EstimandSpec,
    table: &ObservationTable<T>,
    fm: &FeatureMatrix<T>,
    external: Option<&ObservationTable<T>>,
) -> Result<EstimandTarget<T>> {
    spec.validate()?;
    let n = table.n();
    Ok(match spec {
        EstimandSpec::TreatedMean | EstimandSpec::ControlMean | EstimandSpec::Ate => EstimandTarget {
            balance: BalanceTarget::full_sample(fm),
            imputation: Imputation::Sample(vec![T::one(); n]),
        },
        EstimandSpec::Att => {
            let n1 = table.arm_size(Arm::Treated);
            let w = T::from_usize_lossy(n) / T::from_usize_lossy(n1.max(1));
            EstimandTarget {
                balance: BalanceTarget::arm_sample(fm, table.treatment(), Arm::Treated)?,
                imputation: Imputation::Sample(table.indicator(Arm::Treated).into_iter().map(|v| v * w).collect()),
            }
        }
        EstimandSpec::TargetPopulationMean { .. } => {
            let ext = external.ok_or_else(|| Error::Invalid("target-population estimand needs a target table".into()))?;
            let x = ext.covariates_for(table.column_names())?;
            let rows = x.iter_rows().map(|r| fm.eval_point(r)).collect::<Result<Vec<_>>>()?;
            let b = column_means(&rows, fm.p());
            EstimandTarget {
                balance: BalanceTarget::new(b.clone(), TargetProvenance::External { units: ext.n() }),
                imputation: Imputation::Means(b),
            }
        }
        EstimandSpec::CateAtPoint { x0, bandwidth, draws, seed } => {
            if x0.len() != table.d() {
                return Err(Error::Dimension(format!("x0 has {} entries for {} covariates", x0.len(), table.d())));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let rows = (0..*draws)
                .map(|_| {
                    let x: Vec<T> = x0
                        .iter()
                        .map(|&c| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            T::lit(c + bandwidth * z)
                        })
                        .collect();
                    fm.eval_point(&x)
                })
                .collect::<Result<Vec<_>>>()?;
            let b = column_means(&rows, fm.p());
            EstimandTarget {
                balance: BalanceTarget::new(
                    b.clone(),
                    TargetProvenance::GaussianPoint {
                        x0: x0.clone(),
                        bandwidth: *bandwidth,
                        draws: *draws,
                        seed: *seed,
                    },
                ),
                imputation: Imputation::Means(b),
            }
        }
    })
}

fn column_means<T: Scalar>(rows: &[Vec<T>], p: usize) -> Vec<T> {
    let m = T::from_usize_lossy(rows.len().max(1));
    (0..p).map(|j| compensated_sum(rows.iter().map(|r| r[j])) / m).collect()
}

/// Everything [`estimate_effect`] needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationConfig {
    pub estimand: EstimandSpec,
    #[serde(default)]
    pub weighting: WeightingConfig,
    #[serde(default)]
    pub outcome: OutcomeConfig,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Rescale each arm's weights to average one.
    #[serde(default)]
    pub normalize: bool,
}

fn default_level() -> f64 {
    0.95
}

impl EstimationConfig {
    pub fn new(estimand: EstimandSpec) -> Self {
        Self {
            estimand,
            weighting: WeightingConfig::default(),
            outcome: OutcomeConfig::default(),
            level: default_level(),
            normalize: false,
        }
    }
}

/// True conditional means for the error decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle<T> {
    pub m1: Vec<T>,
    pub m0: Vec<T>,
    /// Population means; the sampling term is taken against these.
    pub mu1: f64,
    pub mu0: f64,
}

/// Fits weights (and outcome models) for every arm of the estimand and
/// assembles the point estimate, Wald interval and balance diagnostics.
pub fn estimate_effect<T: Scalar>(
    table: &ObservationTable<T>,
    fm: &FeatureMatrix<T>,
    cfg: &EstimationConfig,
    external: Option<&ObservationTable<T>>,
    oracle: Option<&Oracle<T>>,
) -> Result<EffectEstimate> {
    outcomes(table)?;
    let target = build_balance_target(&cfg.estimand, table, fm, external)?;
    let treatment = table.treatment();
    let mut fits = Vec::new();
    let mut before = BTreeMap::new();
    let mut after = BTreeMap::new();
    for (arm, sign) in cfg.estimand.arms() {
        let sol = fit_weights(fm, treatment, arm, &target.balance, &cfg.weighting)?;
        let weights = if cfg.normalize {
            hajek_normalize(&sol.weights, treatment)?
        } else {
            sol.weights
        };
        let model = if cfg.outcome.enabled {
            fit_crossfit_ridge(table, fm, cfg.outcome.folds, cfg.outcome.penalty, arm, cfg.outcome.seed)?
        } else {
            OutcomeModel::zero(table.n(), arm)
        };
        let uniform = WeightVector::uniform(treatment, arm)?;
        before.insert(
            arm.name().to_string(),
            ImbalanceReport::compute(fm, table, &uniform, &target.balance, None)?,
        );
        after.insert(
            arm.name().to_string(),
            ImbalanceReport::compute(fm, table, &weights, &target.balance, None)?,
        );
        fits.push(ArmFit {
            sign,
            weights,
            model,
            converged: sol.converged,
        });
    }
    let mut est = assemble(table, cfg.estimand.clone(), &target, &fits, cfg.level)?;
    est.imbalance_before = before;
    est.imbalance_after = after;
    if let Some(o) = oracle {
        if matches!(target.imputation, Imputation::Sample(ref w) if w.iter().all(|&v| v == T::one())) {
            let mut acc = ErrorDecomposition {
                imbalance: 0.0,
                noise: 0.0,
                sampling: 0.0,
                total: 0.0,
            };
            for f in &fits {
                let (m, mu) = match f.weights.arm() {
                    Arm::Treated => (&o.m1, o.mu1),
                    Arm::Control => (&o.m0, o.mu0),
                };
                let d = error_decomposition(table, &f.weights, &f.model, m, T::lit(mu))?;
                acc.imbalance += f.sign * d.imbalance;
                acc.noise += f.sign * d.noise;
                acc.sampling += f.sign * d.sampling;
                acc.total += f.sign * d.total;
            }
            est.error_decomposition = Some(acc);
        }
    }
    Ok(est)
}
