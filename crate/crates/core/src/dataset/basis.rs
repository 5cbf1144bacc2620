//! Basis expansions and the scale factors that define the balance model.
//!
//! A column `j` carries a scale `λ_j`: `+inf` asks for exact balance, `0`
//! leaves the column unconstrained, and anything in between bounds the
//! scaled effect of that column in the model ball.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ObservationTable;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::serde_util::inf_map;

pub const INTERCEPT_LABEL: &str = "(intercept)";
/// Hard cap on the number of produced columns.
pub const DEFAULT_MAX_COLUMNS: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    #[serde(alias = "linear-with-intercept")]
    Linear,
    BinaryInteractions,
    Polynomial,
    Hermite,
    Custom,
}

/// Basis configuration, read from the `basis` block of a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub kind: BasisKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_order: Option<usize>,
    /// Order decay `c`: a column of total order `k` gets `λ = c^k` unless overridden.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,
    /// Covariate names for the `custom` kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<String>>,
    #[serde(default = "default_true")]
    pub intercept: bool,
    /// Per-label overrides of `λ`; the key `"*"` sets the non-intercept default.
    #[serde(default, with = "inf_map", skip_serializing_if = "BTreeMap::is_empty")]
    pub scales: BTreeMap<String, f64>,
    /// Standardize non-intercept columns after expansion. Defaults to true for
    /// `linear` and `custom`, false otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardize: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_columns: Option<usize>,
}

fn default_true() -> bool {
    true
}

impl BasisSpec {
    fn bare(kind: BasisKind) -> Self {
        Self {
            kind,
            max_order: None,
            decay: None,
            degree: None,
            columns: None,
            intercept: true,
            scales: BTreeMap::new(),
            standardize: None,
            max_columns: None,
        }
    }

    pub fn linear() -> Self {
        Self::bare(BasisKind::Linear)
    }

    pub fn binary_interactions(max_order: usize, decay: f64) -> Self {
        Self {
            max_order: Some(max_order),
            decay: Some(decay),
            ..Self::bare(BasisKind::BinaryInteractions)
        }
    }

    pub fn polynomial(degree: usize) -> Self {
        Self {
            degree: Some(degree),
            ..Self::bare(BasisKind::Polynomial)
        }
    }

    pub fn hermite(degree: usize) -> Self {
        Self {
            degree: Some(degree),
            ..Self::bare(BasisKind::Hermite)
        }
    }

    pub fn custom(columns: Vec<String>) -> Self {
        Self {
            columns: Some(columns),
            ..Self::bare(BasisKind::Custom)
        }
    }

    pub fn with_scale(mut self, label: impl Into<String>, lambda: f64) -> Self {
        self.scales.insert(label.into(), lambda);
        self
    }

    pub fn with_decay(mut self, decay: f64) -> Self {
        self.decay = Some(decay);
        self
    }

    pub fn wants_standardization(&self) -> bool {
        self.standardize
            .unwrap_or(matches!(self.kind, BasisKind::Linear | BasisKind::Custom))
    }
}

/// A product of univariate factors; no factors means the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    /// `(covariate index, power)` pairs with distinct covariates.
    pub factors: Vec<(usize, u32)>,
    /// Factors are probabilists' Hermite polynomials instead of powers.
    pub hermite: bool,
}

impl Term {
    pub fn order(&self) -> u32 {
        self.factors.iter().map(|&(_, k)| k).sum()
    }

    pub fn eval<T: Scalar>(&self, x: &[T]) -> T {
        self.factors.iter().fold(T::one(), |acc, &(v, k)| {
            let f = if self.hermite {
                hermite_he(k, x[v])
            } else {
                x[v].powi(k as i32)
            };
            acc * f
        })
    }

    fn label(&self, names: &[String]) -> String {
        if self.factors.is_empty() {
            return INTERCEPT_LABEL.to_owned();
        }
        self.factors
            .iter()
            .map(|&(v, k)| match (self.hermite, k) {
                (_, 1) => names[v].clone(),
                (true, k) => format!("He{k}({})", names[v]),
                (false, k) => format!("{}^{k}", names[v]),
            })
            .collect::<Vec<_>>()
            .join(":")
    }
}

/// Probabilists' Hermite polynomial `He_k`.
pub fn hermite_he<T: Scalar>(k: u32, x: T) -> T {
    let (mut prev, mut cur) = (T::one(), x);
    if k == 0 {
        return prev;
    }
    for m in 1..k {
        let next = x * cur - T::from_usize_lossy(m as usize) * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Center and spread used to standardize one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats<T> {
    pub center: T,
    pub spread: T,
}

/// Basis-expanded covariates `Φ` with their scale factors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    values: Matrix<T>,
    scales: Vec<T>,
    labels: Vec<String>,
    intercept: Option<usize>,
    terms: Option<Vec<Term>>,
    standardization: Option<Vec<ColumnStats<T>>>,
    warnings: Vec<String>,
}

impl<T: Scalar> FeatureMatrix<T> {
    /// Wraps an explicit feature matrix. `intercept`, when given, must index a
    /// constant-one column.
    pub fn new(
        values: Matrix<T>,
        scales: Vec<T>,
        labels: Vec<String>,
        intercept: Option<usize>,
    ) -> Result<Self> {
        let p = values.cols();
        if p == 0 {
            return Err(Error::InvalidBasis("feature matrix has no columns".into()));
        }
        if scales.len() != p || labels.len() != p {
            return Err(Error::Dimension(format!(
                "{p} columns but {} scales and {} labels",
                scales.len(),
                labels.len()
            )));
        }
        if let Some(s) = scales.iter().find(|s| s.is_nan() || **s < T::zero()) {
            return Err(Error::InvalidBasis(format!("scale {s} is not in [0, inf]")));
        }
        if let Some(j) = intercept {
            if j >= p || values.iter_rows().any(|r| r[j] != T::one()) {
                return Err(Error::InvalidBasis(
                    "flagged intercept column is not constant 1".into(),
                ));
            }
        }
        Ok(Self {
            values,
            scales,
            labels,
            intercept,
            terms: None,
            standardization: None,
            warnings: Vec::new(),
        })
    }

    /// Unit-scale features from a raw matrix, no intercept.
    pub fn from_raw(values: Matrix<T>) -> Self {
        let p = values.cols();
        let labels = (1..=p).map(|j| format!("f{j}")).collect();
        Self::new(values, vec![T::one(); p], labels, None).expect("valid raw features")
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.values.rows()
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn intercept(&self) -> Option<usize> {
        self.intercept
    }

    pub fn standardization(&self) -> Option<&[ColumnStats<T>]> {
        self.standardization.as_deref()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn terms(&self) -> Option<&[Term]> {
        self.terms.as_deref()
    }

    pub fn with_scales(mut self, scales: Vec<T>) -> Result<Self> {
        if scales.len() != self.p() {
            return Err(Error::Dimension("scale vector length".into()));
        }
        if scales.iter().any(|s| s.is_nan() || *s < T::zero()) {
            return Err(Error::InvalidBasis("scales must lie in [0, inf]".into()));
        }
        self.scales = scales;
        Ok(self)
    }

    /// Multiplies column `j` by `c`, leaving its scale untouched.
    pub fn scale_column(mut self, j: usize, c: T) -> Self {
        for i in 0..self.n() {
            self.values[(i, j)] *= c;
        }
        if self.intercept == Some(j) && c != T::one() {
            self.intercept = None;
        }
        if let Some(st) = &mut self.standardization {
            st[j].spread /= c;
        }
        self
    }

    /// Column means over all units.
    pub fn column_means(&self) -> Vec<T> {
        let n = T::from_usize_lossy(self.n());
        let mut m = self.values.tmatvec(&vec![T::one(); self.n()]);
        for v in &mut m {
            *v /= n;
        }
        m
    }

    /// Population standard deviation of each column.
    pub fn column_sds(&self) -> Vec<T> {
        let means = self.column_means();
        let n = T::from_usize_lossy(self.n());
        (0..self.p())
            .map(|j| {
                let ss: T = self
                    .values
                    .iter_rows()
                    .map(|r| (r[j] - means[j]).powi(2))
                    .sum();
                (ss / n).sqrt()
            })
            .collect()
    }

    /// Restricts to a subset of units (rows).
    pub fn select_units(&self, idx: &[usize]) -> Self {
        Self {
            values: self.values.select_rows(idx),
            ..self.clone()
        }
    }

    /// Evaluates the feature map (including any standardization) at a raw covariate vector.
    pub fn eval_point(&self, x: &[T]) -> Result<Vec<T>> {
        let terms = self.terms.as_ref().ok_or_else(|| {
            Error::Invalid("feature matrix was not built from a basis; cannot evaluate new points".into())
        })?;
        let mut row: Vec<T> = terms.iter().map(|t| t.eval(x)).collect();
        if let Some(st) = &self.standardization {
            for (v, s) in row.iter_mut().zip(st) {
                *v = (*v - s.center) / s.spread;
            }
        }
        Ok(row)
    }

    /// Undoes standardization, returning features in original units.
    pub fn destandardized_values(&self) -> Matrix<T> {
        let mut out = self.values.clone();
        if let Some(st) = &self.standardization {
            for i in 0..out.rows() {
                for (j, s) in st.iter().enumerate() {
                    out[(i, j)] = out[(i, j)] * s.spread + s.center;
                }
            }
        }
        out
    }
}

fn binomial_saturating(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// Index sequences of length `order` over `d` variables, in lexicographic order;
/// `repeat` allows a variable to appear more than once.
fn index_sequences(d: usize, order: usize, repeat: bool) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(order);
    fn rec(d: usize, order: usize, repeat: bool, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == order {
            out.push(cur.clone());
            return;
        }
        for v in start..d {
            cur.push(v);
            rec(d, order, repeat, if repeat { v } else { v + 1 }, cur, out);
            cur.pop();
        }
    }
    rec(d, order, repeat, 0, &mut cur, &mut out);
    out
}

fn to_term(seq: &[usize], hermite: bool) -> Term {
    let mut factors: Vec<(usize, u32)> = Vec::new();
    for &v in seq {
        match factors.last_mut() {
            Some((last, k)) if *last == v => *k += 1,
            _ => factors.push((v, 1)),
        }
    }
    Term { factors, hermite }
}

fn graded_terms(d: usize, max_order: usize, repeat: bool, hermite: bool, intercept: bool) -> Vec<Term> {
    let mut terms = Vec::new();
    if intercept {
        terms.push(Term {
            factors: Vec::new(),
            hermite,
        });
    }
    for order in 1..=max_order {
        terms.extend(
            index_sequences(d, order, repeat)
                .iter()
                .map(|s| to_term(s, hermite)),
        );
    }
    terms
}

/// Columns of a basis over covariates named `names`: terms, labels and scales.
/// Ordered by total order, then lexicographically by covariate index.
pub fn basis_terms(spec: &BasisSpec, names: &[String]) -> Result<(Vec<Term>, Vec<String>, Vec<f64>)> {
    let d = names.len();
    let cap = spec.max_columns.unwrap_or(DEFAULT_MAX_COLUMNS);
    let check_cap = |count: u128| -> Result<()> {
        if count > cap as u128 {
            Err(Error::TooManyColumns {
                requested: usize::try_from(count).unwrap_or(usize::MAX),
                cap,
            })
        } else {
            Ok(())
        }
    };
    let intercept_count = u128::from(spec.intercept);
    if let Some(c) = spec.decay {
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::InvalidBasis(format!("decay {c} must lie in (0, 1]")));
        }
    }

    let terms: Vec<Term> = match spec.kind {
        BasisKind::Linear => {
            check_cap(d as u128 + intercept_count)?;
            graded_terms(d, 1, false, false, spec.intercept)
        }
        BasisKind::BinaryInteractions => {
            let k = spec
                .max_order
                .ok_or_else(|| Error::InvalidBasis("binary-interactions needs max_order".into()))?;
            if k > d {
                return Err(Error::InvalidBasis(format!("max_order {k} exceeds d = {d}")));
            }
            if spec.decay.is_none() {
                return Err(Error::InvalidBasis("binary-interactions needs decay".into()));
            }
            let count: u128 = (1..=k).map(|m| binomial_saturating(d, m)).sum::<u128>() + intercept_count;
            check_cap(count)?;
            graded_terms(d, k, false, false, spec.intercept)
        }
        BasisKind::Polynomial | BasisKind::Hermite => {
            let q = spec
                .degree
                .ok_or_else(|| Error::InvalidBasis("polynomial bases need degree".into()))?;
            if q == 0 {
                return Err(Error::InvalidBasis("degree must be at least 1".into()));
            }
            check_cap(binomial_saturating(d + q, q) - 1 + intercept_count)?;
            graded_terms(d, q, true, spec.kind == BasisKind::Hermite, spec.intercept)
        }
        BasisKind::Custom => {
            let cols = spec
                .columns
                .as_ref()
                .ok_or_else(|| Error::InvalidBasis("custom basis needs columns".into()))?;
            check_cap(cols.len() as u128 + intercept_count)?;
            let mut terms = Vec::new();
            if spec.intercept {
                terms.push(Term {
                    factors: Vec::new(),
                    hermite: false,
                });
            }
            for c in cols {
                let v = names
                    .iter()
                    .position(|n| n == c)
                    .ok_or_else(|| Error::MissingColumn(c.clone()))?;
                terms.push(Term {
                    factors: vec![(v, 1)],
                    hermite: false,
                });
            }
            terms
        }
    };
    if terms.is_empty() {
        return Err(Error::InvalidBasis("basis produced no columns".into()));
    }

    let labels: Vec<String> = terms.iter().map(|t| t.label(names)).collect();
    for key in spec.scales.keys() {
        if key != "*" && key != "intercept" && !labels.contains(key) {
            return Err(Error::InvalidBasis(format!("scale given for unknown column `{key}`")));
        }
    }
    let scales: Vec<f64> = terms
        .iter()
        .zip(&labels)
        .map(|(t, label)| {
            let lambda = if let Some(&v) = spec.scales.get(label) {
                v
            } else if t.factors.is_empty() {
                spec.scales.get("intercept").copied().unwrap_or(f64::INFINITY)
            } else if let Some(&v) = spec.scales.get("*") {
                v
            } else {
                spec.decay.map_or(1.0, |c| c.powi(t.order() as i32))
            };
            if lambda.is_nan() || lambda < 0.0 {
                return Err(Error::InvalidBasis(format!("scale {lambda} for `{label}` not in [0, inf]")));
            }
            Ok(lambda)
        })
        .collect::<Result<_>>()?;
    Ok((terms, labels, scales))
}

/// Builds `Φ` and `λ` from a table according to `spec`. Standardization is
/// not applied here; see [`standardize`].
pub fn expand_basis<T: Scalar>(table: &ObservationTable<T>, spec: &BasisSpec) -> Result<FeatureMatrix<T>> {
    let names = table.column_names();
    let (terms, labels, scales) = basis_terms(spec, names)?;
    if spec.kind == BasisKind::BinaryInteractions {
        for (row, r) in table.covariates().iter_rows().enumerate() {
            if let Some(j) = r.iter().position(|&v| v != T::zero() && v != T::one()) {
                return Err(Error::NonBinaryCovariate {
                    column: names[j].clone(),
                    row,
                });
            }
        }
    }
    let n = table.n();
    let p = terms.len();
    let mut data = Vec::with_capacity(n * p);
    for r in table.covariates().iter_rows() {
        data.extend(terms.iter().map(|t| t.eval(r)));
    }
    let intercept = terms.iter().position(|t| t.factors.is_empty());
    let scales = scales.into_iter().map(T::lit).collect();
    let mut fm = FeatureMatrix::new(Matrix::from_row_major(n, p, data), scales, labels, intercept)?;
    fm.terms = Some(terms);
    Ok(fm)
}

/// Expands and, when the spec asks for it, standardizes.
pub fn build_features<T: Scalar>(table: &ObservationTable<T>, spec: &BasisSpec) -> Result<FeatureMatrix<T>> {
    let fm = expand_basis(table, spec)?;
    Ok(if spec.wants_standardization() {
        standardize(&fm)
    } else {
        fm
    })
}

/// Centers each non-intercept column at its mean and divides by its population
/// standard deviation. Constant columns are dropped and listed in `warnings`.
pub fn standardize<T: Scalar>(fm: &FeatureMatrix<T>) -> FeatureMatrix<T> {
    let means = fm.column_means();
    let sds = fm.column_sds();
    let prior = fm.standardization.clone();
    let mut keep = Vec::new();
    let mut warnings = fm.warnings.clone();
    let mut stats = Vec::new();
    for j in 0..fm.p() {
        if Some(j) == fm.intercept {
            keep.push(j);
            stats.push(ColumnStats {
                center: T::zero(),
                spread: T::one(),
            });
            continue;
        }
        let tiny = T::lit(1e-14) * means[j].abs().max(T::one());
        if sds[j] <= tiny {
            warnings.push(format!("dropped constant column `{}`", fm.labels[j]));
            continue;
        }
        keep.push(j);
        stats.push(ColumnStats {
            center: means[j],
            spread: sds[j],
        });
    }
    let n = fm.n();
    let mut data = Vec::with_capacity(n * keep.len());
    for r in fm.values.iter_rows() {
        for (&j, s) in keep.iter().zip(&stats) {
            data.push((r[j] - s.center) / s.spread);
        }
    }
    // Compose with an earlier standardization so stats always map back to the
    // original basis values.
    let composed: Vec<ColumnStats<T>> = keep
        .iter()
        .zip(&stats)
        .map(|(&j, s)| match &prior {
            Some(pr) => ColumnStats {
                center: pr[j].center + pr[j].spread * s.center,
                spread: pr[j].spread * s.spread,
            },
            None => *s,
        })
        .collect();
    FeatureMatrix {
        values: Matrix::from_row_major(n, keep.len(), data),
        scales: keep.iter().map(|&j| fm.scales[j]).collect(),
        labels: keep.iter().map(|&j| fm.labels[j].clone()).collect(),
        intercept: fm
            .intercept
            .and_then(|i| keep.iter().position(|&j| j == i)),
        terms: fm
            .terms
            .as_ref()
            .map(|t| keep.iter().map(|&j| t[j].clone()).collect()),
        standardization: Some(composed),
        warnings,
    }
}
