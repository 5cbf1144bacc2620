//! Weight vectors, balance targets and imbalance measures.
//!
//! Imbalance is always `target − weighted average`, so a positive entry means
//! the weighted group falls short of the target on that feature.

use serde::{Deserialize, Serialize};

use crate::dataset::{Arm, FeatureMatrix, ObservationTable};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{compensated_sum, Scalar};
use crate::serde_util::inf_f64;

/// Tolerance used when deriving the normalization flags of a weight vector.
pub const FLAG_TOL: f64 = 1e-9;
/// Tolerance on kernel symmetry and on negative squared kernel imbalance.
pub const KERNEL_TOL: f64 = 1e-8;

/// Unit weights `γ_i`, zero outside the weighted arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightVector<T> {
    values: Vec<T>,
    arm: Arm,
    sum_to_one: bool,
    nonnegative: bool,
}

impl<T: Scalar> WeightVector<T> {
    /// Wraps full-length weights. Entries outside `arm` must be zero.
    pub fn new(values: Vec<T>, treatment: &[bool], arm: Arm) -> Result<Self> {
        if values.len() != treatment.len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} units",
                values.len(),
                treatment.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("weights must be finite".into()));
        }
        if let Some(i) = (0..values.len()).find(|&i| !arm.contains(treatment[i]) && values[i] != T::zero()) {
            return Err(Error::Invalid(format!(
                "unit {i} is outside the {} arm but has a nonzero weight",
                arm.name()
            )));
        }
        Ok(Self::flagged(values, arm))
    }

    fn flagged(values: Vec<T>, arm: Arm) -> Self {
        let n = T::from_usize_lossy(values.len().max(1));
        let mean = compensated_sum(values.iter().copied()) / n;
        let tol = T::lit(FLAG_TOL).max(T::epsilon() * T::lit(64.0));
        Self {
            sum_to_one: (mean - T::one()).abs() <= tol,
            nonnegative: values.iter().all(|&v| v >= T::zero()),
            values,
            arm,
        }
    }

    /// Scatters weights given for the arm's units (in unit order) into a full vector.
    pub fn from_group(group: &[T], treatment: &[bool], arm: Arm) -> Result<Self> {
        let idx: Vec<usize> = (0..treatment.len()).filter(|&i| arm.contains(treatment[i])).collect();
        if idx.len() != group.len() {
            return Err(Error::Dimension(format!(
                "{} group weights for {} {} units",
                group.len(),
                idx.len(),
                arm.name()
            )));
        }
        let mut values = vec![T::zero(); treatment.len()];
        for (&i, &g) in idx.iter().zip(group) {
            values[i] = g;
        }
        Self::new(values, treatment, arm)
    }

    /// `n / n_arm` on every unit of the arm.
    pub fn uniform(treatment: &[bool], arm: Arm) -> Result<Self> {
        let na = treatment.iter().filter(|&&w| arm.contains(w)).count();
        if na == 0 {
            return Err(Error::EmptyGroup);
        }
        let w = T::from_usize_lossy(treatment.len()) / T::from_usize_lossy(na);
        let values = treatment
            .iter()
            .map(|&t| if arm.contains(t) { w } else { T::zero() })
            .collect();
        Ok(Self::flagged(values, arm))
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn arm(&self) -> Arm {
        self.arm
    }

    /// `(1/n) Σ γ_i = 1` within [`FLAG_TOL`].
    pub fn sum_to_one(&self) -> bool {
        self.sum_to_one
    }

    pub fn nonnegative(&self) -> bool {
        self.nonnegative
    }

    /// `(1/n) Σ γ_i`.
    pub fn mean(&self) -> T {
        compensated_sum(self.values.iter().copied()) / T::from_usize_lossy(self.len())
    }

    /// Weights of the arm's units, in unit order.
    pub fn group_values(&self, treatment: &[bool]) -> Vec<T> {
        self.values
            .iter()
            .zip(treatment)
            .filter(|(_, &t)| self.arm.contains(t))
            .map(|(&v, _)| v)
            .collect()
    }

    pub fn scaled(&self, c: T) -> Self {
        Self::flagged(self.values.iter().map(|&v| v * c).collect(), self.arm)
    }

    /// Casts to another scalar width.
    pub fn cast<U: Scalar>(&self) -> WeightVector<U> {
        WeightVector::flagged(
            self.values.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            self.arm,
        )
    }
}

/// Where a balance target came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetProvenance {
    FullSample,
    ArmSample { arm: Arm },
    External { units: usize },
    GaussianPoint {
        x0: Vec<f64>,
        bandwidth: f64,
        draws: usize,
        seed: u64,
    },
    Custom,
}

/// Feature means `b` the weighted group must reproduce.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceTarget<T> {
    pub target_means: Vec<T>,
    pub provenance: TargetProvenance,
}

impl<T: Scalar> BalanceTarget<T> {
    pub fn new(target_means: Vec<T>, provenance: TargetProvenance) -> Self {
        Self {
            target_means,
            provenance,
        }
    }

    /// Column means of `Φ` over every unit.
    pub fn full_sample(fm: &FeatureMatrix<T>) -> Self {
        Self::new(fm.column_means(), TargetProvenance::FullSample)
    }

    /// Column means of `Φ` over the units of one arm.
    pub fn arm_sample(fm: &FeatureMatrix<T>, treatment: &[bool], arm: Arm) -> Result<Self> {
        let idx: Vec<usize> = (0..treatment.len()).filter(|&i| arm.contains(treatment[i])).collect();
        if idx.is_empty() {
            return Err(Error::EmptyGroup);
        }
        Ok(Self::new(
            fm.select_units(&idx).column_means(),
            TargetProvenance::ArmSample { arm },
        ))
    }

    pub fn len(&self) -> usize {
        self.target_means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_means.is_empty()
    }
}

fn check_lengths<T: Scalar>(fm: &FeatureMatrix<T>, treatment: &[bool], g: &WeightVector<T>) -> Result<()> {
    if treatment.len() != fm.n() || g.len() != fm.n() {
        return Err(Error::Dimension(format!(
            "{} units in features, {} treatment entries, {} weights",
            fm.n(),
            treatment.len(),
            g.len()
        )));
    }
    Ok(())
}

/// `d_j = b_j − (1/n) Σ_i A_i γ_i φ_j(X_i)` where `A` indicates the weighted arm.
pub fn feature_imbalance<T: Scalar>(
    fm: &FeatureMatrix<T>,
    treatment: &[bool],
    g: &WeightVector<T>,
    t: &BalanceTarget<T>,
) -> Result<Vec<T>> {
    check_lengths(fm, treatment, g)?;
    if t.len() != fm.p() {
        return Err(Error::Dimension(format!(
            "target has {} means for {} features",
            t.len(),
            fm.p()
        )));
    }
    let arm = g.arm();
    let n = T::from_usize_lossy(fm.n());
    let aw: Vec<T> = g
        .values()
        .iter()
        .zip(treatment)
        .map(|(&v, &w)| if arm.contains(w) { v } else { T::zero() })
        .collect();
    let avg = fm.values().tmatvec(&aw);
    Ok(t.target_means
        .iter()
        .zip(avg)
        .map(|(&b, s)| b - s / n)
        .collect())
}

fn check_scales<T: Scalar>(d: &[T], lambda: &[T]) -> Result<()> {
    if d.len() != lambda.len() {
        return Err(Error::Dimension(format!(
            "{} imbalances for {} scales",
            d.len(),
            lambda.len()
        )));
    }
    Ok(())
}

/// `max_j λ_j |d_j|` over columns with finite positive `λ_j`; zero if there are none.
pub fn max_imbalance_l1ball<T: Scalar>(d: &[T], lambda: &[T]) -> Result<T> {
    check_scales(d, lambda)?;
    Ok(d.iter()
        .zip(lambda)
        .filter(|(_, l)| l.is_finite() && **l > T::zero())
        .fold(T::zero(), |m, (&dj, &l)| m.max(l * dj.abs())))
}

/// `sqrt(Σ_j λ_j² d_j²)` over columns with finite positive `λ_j`.
pub fn imbalance_l2ball<T: Scalar>(d: &[T], lambda: &[T]) -> Result<T> {
    check_scales(d, lambda)?;
    let ss = compensated_sum(
        d.iter()
            .zip(lambda)
            .filter(|(_, l)| l.is_finite() && **l > T::zero())
            .map(|(&dj, &l)| (l * dj).powi(2)),
    );
    Ok(ss.sqrt())
}

/// Largest `|d_j|` over exact-balance columns (`λ_j = ∞`).
pub fn constraint_residual<T: Scalar>(d: &[T], lambda: &[T]) -> Result<T> {
    check_scales(d, lambda)?;
    Ok(d.iter()
        .zip(lambda)
        .filter(|(_, l)| l.is_infinite())
        .fold(T::zero(), |m, (&dj, _)| m.max(dj.abs())))
}

/// Maximal imbalance over the unit ball of the RKHS with Gram matrix `K`,
/// against the full sample.
pub fn kernel_imbalance<T: Scalar>(k: &Matrix<T>, treatment: &[bool], g: &WeightVector<T>) -> Result<T> {
    let omega = vec![T::one(); treatment.len()];
    kernel_imbalance_against(k, treatment, g, &omega)
}

/// Same as [`kernel_imbalance`] with target weights `ω` in place of the full
/// sample: `sqrt((1/n²) (ω − Aγ)ᵀ K (ω − Aγ))`.
pub fn kernel_imbalance_against<T: Scalar>(
    k: &Matrix<T>,
    treatment: &[bool],
    g: &WeightVector<T>,
    omega: &[T],
) -> Result<T> {
    let n = treatment.len();
    if k.rows() != n || k.cols() != n || g.len() != n || omega.len() != n {
        return Err(Error::Dimension("kernel, treatment, weights and target must share n".into()));
    }
    let scale = k.as_slice().iter().fold(T::one(), |m, v| m.max(v.abs()));
    let asym = k.max_asymmetry();
    if asym > T::lit(KERNEL_TOL) * scale {
        return Err(Error::AsymmetricKernel(asym.to_f64_lossy()));
    }
    let arm = g.arm();
    let v: Vec<T> = (0..n)
        .map(|i| {
            let a = if arm.contains(treatment[i]) { g.values()[i] } else { T::zero() };
            omega[i] - a
        })
        .collect();
    let kv = k.matvec(&v);
    let nn = T::from_usize_lossy(n);
    let q = compensated_sum(v.iter().zip(&kv).map(|(&a, &b)| a * b)) / (nn * nn);
    if q < -T::lit(KERNEL_TOL) {
        return Err(Error::NotPsd(q.to_f64_lossy()));
    }
    Ok(q.max(T::zero()).sqrt())
}

/// Per-covariate Kolmogorov–Smirnov distance between the weighted empirical
/// CDF of the weighted arm and the unweighted full-sample CDF.
pub fn ks_statistics<T: Scalar>(table: &ObservationTable<T>, g: &WeightVector<T>) -> Result<Vec<T>> {
    if g.len() != table.n() {
        return Err(Error::Dimension("weights do not match the table".into()));
    }
    if !g.nonnegative() {
        return Err(Error::NegativeWeights);
    }
    let arm = g.arm();
    let w: Vec<T> = (0..table.n())
        .map(|i| if arm.contains(table.treatment()[i]) { g.values()[i] } else { T::zero() })
        .collect();
    let total = compensated_sum(w.iter().copied());
    if total <= T::zero() {
        return Err(Error::ZeroWeights);
    }
    let n = table.n();
    let inv_n = T::one() / T::from_usize_lossy(n);
    let x = table.covariates();
    let mut out = Vec::with_capacity(table.d());
    for j in 0..table.d() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| x[(a, j)].partial_cmp(&x[(b, j)]).expect("finite covariates"));
        let (mut fw, mut ff, mut ks) = (T::zero(), T::zero(), T::zero());
        let mut k = 0;
        while k < n {
            let v = x[(order[k], j)];
            while k < n && x[(order[k], j)] == v {
                fw += w[order[k]] / total;
                ff += inv_n;
                k += 1;
            }
            ks = ks.max((fw - ff).abs());
        }
        out.push(ks);
    }
    Ok(out)
}

/// `(Σγ)² / Σγ²`.
pub fn effective_sample_size<T: Scalar>(g: &WeightVector<T>) -> Result<T> {
    let s = compensated_sum(g.values().iter().copied());
    let ss = compensated_sum(g.values().iter().map(|&v| v * v));
    if ss == T::zero() {
        return Err(Error::ZeroWeights);
    }
    Ok(s * s / ss)
}

/// One row of the balance table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureImbalance {
    pub feature: String,
    pub raw: f64,
    /// Raw imbalance divided by the full-sample SD of the column; absent for
    /// constant columns.
    pub sd_units: Option<f64>,
    #[serde(with = "inf_f64")]
    pub lambda: f64,
    /// `λ_j |d_j|` for finite positive `λ_j`.
    pub scaled: Option<f64>,
}

/// Balance diagnostics for one weight vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImbalanceReport {
    pub per_feature: Vec<FeatureImbalance>,
    pub max_l1ball: f64,
    pub l2ball: f64,
    /// Largest absolute imbalance among exact-balance columns.
    pub constraint_residual: f64,
    pub kernel: Option<f64>,
    pub ks_per_covariate: Vec<(String, f64)>,
    pub effective_sample_size: f64,
    pub weighted_units: usize,
}

impl ImbalanceReport {
    /// Computes every diagnostic. KS statistics are skipped (left empty) for
    /// signed weights; `gram` enables the kernel imbalance.
    pub fn compute<T: Scalar>(
        fm: &FeatureMatrix<T>,
        table: &ObservationTable<T>,
        g: &WeightVector<T>,
        t: &BalanceTarget<T>,
        gram: Option<&Matrix<T>>,
    ) -> Result<Self> {
        let treatment = table.treatment();
        let d = feature_imbalance(fm, treatment, g, t)?;
        let sds = fm.column_sds();
        let per_feature = d
            .iter()
            .zip(fm.scales())
            .zip(fm.labels())
            .zip(&sds)
            .map(|(((&dj, &l), label), &sd)| {
                let raw = dj.to_f64_lossy();
                let sd = sd.to_f64_lossy();
                let l = l.to_f64_lossy();
                FeatureImbalance {
                    feature: label.clone(),
                    raw,
                    sd_units: (sd > 0.0).then(|| raw / sd),
                    lambda: l,
                    scaled: (l.is_finite() && l > 0.0).then(|| l * raw.abs()),
                }
            })
            .collect();
        let ks_per_covariate = if g.nonnegative() && g.values().iter().any(|&v| v > T::zero()) {
            table
                .column_names()
                .iter()
                .cloned()
                .zip(ks_statistics(table, g)?.into_iter().map(|v| v.to_f64_lossy()))
                .collect()
        } else {
            Vec::new()
        };
        let kernel = gram
            .map(|k| kernel_imbalance(k, treatment, g).map(|v| v.to_f64_lossy()))
            .transpose()?;
        let ess = effective_sample_size(g).map_or(0.0, |v| v.to_f64_lossy());
        Ok(Self {
            per_feature,
            max_l1ball: max_imbalance_l1ball(&d, fm.scales())?.to_f64_lossy(),
            l2ball: imbalance_l2ball(&d, fm.scales())?.to_f64_lossy(),
            constraint_residual: constraint_residual(&d, fm.scales())?.to_f64_lossy(),
            kernel,
            ks_per_covariate,
            effective_sample_size: ess,
            weighted_units: table.arm_size(g.arm()),
        })
    }

    /// Aligned plain-text balance table.
    pub fn to_text(&self) -> String {
        let width = self
            .per_feature
            .iter()
            .map(|f| f.feature.len())
            .max()
            .unwrap_or(7)
            .max(7);
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |x| format!("{x:.6}"));
        let mut s = format!(
            "{:<width$}  {:>12}  {:>12}  {:>10}  {:>12}\n",
            "feature", "raw", "sd units", "lambda", "scaled"
        );
        for f in &self.per_feature {
            s += &format!(
                "{:<width$}  {:>12.6}  {:>12}  {:>10}  {:>12}\n",
                f.feature,
                f.raw,
                opt(f.sd_units),
                if f.lambda.is_infinite() { "inf".to_owned() } else { format!("{:.4}", f.lambda) },
                opt(f.scaled)
            );
        }
        s += &format!("max scaled imbalance (l1 ball): {:.6e}\n", self.max_l1ball);
        s += &format!("imbalance (l2 ball):            {:.6e}\n", self.l2ball);
        s += &format!("exact-balance residual:         {:.6e}\n", self.constraint_residual);
        if let Some(k) = self.kernel {
            s += &format!("kernel imbalance:               {k:.6e}\n");
        }
        for (name, ks) in &self.ks_per_covariate {
            s += &format!("KS {name}: {ks:.6}\n");
        }
        s += &format!(
            "effective sample size: {:.2} of {} weighted units\n",
            self.effective_sample_size, self.weighted_units
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FeatureMatrix;

    fn one_feature(x: &[f64]) -> FeatureMatrix<f64> {
        FeatureMatrix::from_raw(Matrix::from_row_major(x.len(), 1, x.to_vec()))
    }

    #[test]
    fn feature_imbalance_two_units() {
        let fm = one_feature(&[1.0, 3.0]);
        let treat = [true, false];
        let t = BalanceTarget::full_sample(&fm);
        assert_eq!(t.target_means, [2.0]);
        let g = WeightVector::new(vec![2.0, 0.0], &treat, Arm::Treated).unwrap();
        assert_eq!(feature_imbalance(&fm, &treat, &g, &t).unwrap(), [1.0]);
        let g = WeightVector::new(vec![4.0, 0.0], &treat, Arm::Treated).unwrap();
        assert_eq!(feature_imbalance(&fm, &treat, &g, &t).unwrap(), [0.0]);
    }

    #[test]
    fn off_group_weights_are_rejected() {
        assert!(WeightVector::new(vec![1.0, 1.0], &[true, false], Arm::Treated).is_err());
        assert!(WeightVector::new(vec![1.0], &[true, false], Arm::Treated).is_err());
    }

    #[test]
    fn ball_norms() {
        let inf = f64::INFINITY;
        assert_eq!(max_imbalance_l1ball(&[1.0, -2.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(max_imbalance_l1ball(&[1.0, -2.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert_eq!(max_imbalance_l1ball(&[0.5, 0.5], &[2.0, 1.0]).unwrap(), 1.0);
        assert_eq!(max_imbalance_l1ball(&[7.0, 0.5], &[inf, 1.0]).unwrap(), 0.5);
        assert_eq!(constraint_residual(&[-7.0, 0.5], &[inf, 1.0]).unwrap(), 7.0);
        assert_eq!(imbalance_l2ball(&[3.0, 4.0], &[1.0, 1.0]).unwrap(), 5.0);
        assert_eq!(imbalance_l2ball(&[3.0, 4.0], &[1.0, 0.0]).unwrap(), 3.0);
        assert_eq!(imbalance_l2ball(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(imbalance_l2ball(&[0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn kernel_imbalance_zero_for_matching_duplicates() {
        // Treated rows duplicate the control rows, so uniform n/n1 weights match exactly.
        let x = [0.3, 1.2, 0.3, 1.2];
        let treat = [true, true, false, false];
        let k = Matrix::from_row_major(4, 4, (0..16).map(|e| x[e / 4] * x[e % 4]).collect());
        let g = WeightVector::uniform(&treat, Arm::Treated).unwrap();
        assert!(kernel_imbalance(&k, &treat, &g).unwrap() < 1e-12);
    }

    #[test]
    fn kernel_rejects_asymmetry_and_indefiniteness() {
        let treat = [true, false];
        let g = WeightVector::new(vec![0.0, 0.0], &treat, Arm::Treated).unwrap();
        let k = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]);
        assert!(matches!(kernel_imbalance(&k, &treat, &g), Err(Error::AsymmetricKernel(_))));
        let k = Matrix::from_rows(&[vec![-1.0, 0.0], vec![0.0, -1.0]]);
        assert!(matches!(kernel_imbalance(&k, &treat, &g), Err(Error::NotPsd(_))));
    }

    #[test]
    fn ks_step_function() {
        let table = ObservationTable::new(
            Matrix::from_row_major(2, 1, vec![1.0, 0.0]),
            vec![true, false],
            None,
            vec!["x".into()],
        )
        .unwrap();
        let g = WeightVector::uniform(table.treatment(), Arm::Treated).unwrap();
        assert_eq!(ks_statistics(&table, &g).unwrap(), [0.5]);
        let neg = WeightVector::new(vec![-1.0, 0.0], table.treatment(), Arm::Treated).unwrap();
        assert!(matches!(ks_statistics(&table, &neg), Err(Error::NegativeWeights)));
    }

    #[test]
    fn ks_zero_for_identical_distributions() {
        let table = ObservationTable::new(
            Matrix::from_row_major(4, 2, vec![0.1, 5.0, 0.7, 2.0, 0.1, 5.0, 0.7, 2.0]),
            vec![true, true, false, false],
            None,
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let g = WeightVector::uniform(table.treatment(), Arm::Treated).unwrap();
        assert_eq!(ks_statistics(&table, &g).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn ess_examples() {
        let treat = [true; 4];
        let g = WeightVector::<f64>::uniform(&treat, Arm::Treated).unwrap();
        assert!((effective_sample_size(&g).unwrap() - 4.0).abs() < 1e-12);
        let g = WeightVector::new(vec![0.0, 3.0, 0.0, 0.0], &treat, Arm::Treated).unwrap();
        assert_eq!(effective_sample_size(&g).unwrap(), 1.0);
        let g = WeightVector::<f64>::new(vec![1.0, 3.0], &[true, true], Arm::Treated).unwrap();
        assert!((effective_sample_size(&g).unwrap() - 1.6).abs() < 1e-15);
        let z = WeightVector::new(vec![0.0, 0.0], &[true, true], Arm::Treated).unwrap();
        assert!(matches!(effective_sample_size(&z), Err(Error::ZeroWeights)));
    }

    #[test]
    fn flags_follow_values() {
        let treat = [true, false, true];
        let g = WeightVector::<f64>::uniform(&treat, Arm::Treated).unwrap();
        assert!(g.sum_to_one() && g.nonnegative());
        let h = g.scaled(-1.0);
        assert!(!h.sum_to_one() && !h.nonnegative());
        assert_eq!(g.group_values(&treat), [1.5, 1.5]);
    }

    #[test]
    fn report_text_lists_every_feature() {
        let table = ObservationTable::new(
            Matrix::from_row_major(3, 1, vec![0.0, 1.0, 2.0]),
            vec![true, false, true],
            None,
            vec!["x".into()],
        )
        .unwrap();
        let fm = crate::dataset::expand_basis(&table, &crate::dataset::BasisSpec::linear()).unwrap();
        let g = WeightVector::uniform(table.treatment(), Arm::Treated).unwrap();
        let t = BalanceTarget::full_sample(&fm);
        let r = ImbalanceReport::compute(&fm, &table, &g, &t, None).unwrap();
        assert_eq!(r.per_feature.len(), 2);
        assert!(r.constraint_residual < 1e-12);
        let text = r.to_text();
        assert!(text.contains("(intercept)") && text.contains("inf"));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"lambda\":\"inf\""));
    }
}
