//! Observation tables and their ingestion from CSV.

mod basis;

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub use basis::{
    basis_terms, build_features, expand_basis, hermite_he, standardize, BasisKind, BasisSpec,
    ColumnStats, FeatureMatrix, Term, DEFAULT_MAX_COLUMNS, INTERCEPT_LABEL,
};

/// Which treatment arm carries the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    #[default]
    Treated,
    Control,
}

impl Arm {
    #[inline]
    pub fn contains(self, treated: bool) -> bool {
        match self {
            Arm::Treated => treated,
            Arm::Control => !treated,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Treated => "treated",
            Arm::Control => "control",
        }
    }
}

/// Column roles used when reading a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub treatment: String,
    #[serde(default)]
    pub outcome: Option<String>,
    /// Explicit covariate list; when absent every remaining column is a covariate.
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
    /// Optional unit identifier column (kept as text).
    #[serde(default)]
    pub id: Option<String>,
    /// Columns to ignore entirely (e.g. simulation ground truth).
    #[serde(default)]
    pub exclude: Vec<String>,
}

impl Schema {
    pub fn new(treatment: impl Into<String>) -> Self {
        Self {
            treatment: treatment.into(),
            ..Self::default()
        }
    }

    pub fn with_outcome(mut self, outcome: impl Into<String>) -> Self {
        self.outcome = Some(outcome.into());
        self
    }
}

/// Units with covariates, a binary treatment and an optional outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable<T> {
    covariates: Matrix<T>,
    treatment: Vec<bool>,
    outcome: Option<Vec<T>>,
    column_names: Vec<String>,
    ids: Vec<String>,
}

impl<T: Scalar> ObservationTable<T> {
    pub fn new(
        covariates: Matrix<T>,
        treatment: Vec<bool>,
        outcome: Option<Vec<T>>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let n = covariates.rows();
        if n < 2 {
            return Err(Error::Invalid(format!("need at least 2 units, got {n}")));
        }
        if treatment.len() != n {
            return Err(Error::Dimension(format!(
                "treatment has {} entries for {n} units",
                treatment.len()
            )));
        }
        if let Some(y) = &outcome {
            if y.len() != n {
                return Err(Error::Dimension(format!(
                    "outcome has {} entries for {n} units",
                    y.len()
                )));
            }
            if let Some(row) = y.iter().position(|v| !v.is_finite()) {
                return Err(Error::MissingValue {
                    column: "outcome".into(),
                    row,
                });
            }
        }
        if column_names.len() != covariates.cols() {
            return Err(Error::Dimension(format!(
                "{} column names for {} covariates",
                column_names.len(),
                covariates.cols()
            )));
        }
        let mut seen = HashSet::new();
        for name in &column_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateColumn(name.clone()));
            }
        }
        for (row, r) in covariates.iter_rows().enumerate() {
            if let Some(j) = r.iter().position(|v| !v.is_finite()) {
                return Err(Error::MissingValue {
                    column: column_names[j].clone(),
                    row,
                });
            }
        }
        let ids = (1..=n).map(|i| i.to_string()).collect();
        Ok(Self {
            covariates,
            treatment,
            outcome,
            column_names,
            ids,
        })
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n() {
            return Err(Error::Dimension("id column length".into()));
        }
        self.ids = ids;
        Ok(self)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.covariates.rows()
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.covariates.cols()
    }

    pub fn covariates(&self) -> &Matrix<T> {
        &self.covariates
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn outcome(&self) -> Option<&[T]> {
        self.outcome.as_deref()
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Replaces (or removes) the outcome vector.
    pub fn with_outcome(mut self, outcome: Option<Vec<T>>) -> Result<Self> {
        if let Some(y) = &outcome {
            if y.len() != self.n() {
                return Err(Error::Dimension("outcome length".into()));
            }
        }
        self.outcome = outcome;
        Ok(self)
    }

    /// 1 for units in `arm`, 0 otherwise.
    pub fn indicator(&self, arm: Arm) -> Vec<T> {
        self.treatment
            .iter()
            .map(|&w| if arm.contains(w) { T::one() } else { T::zero() })
            .collect()
    }

    pub fn arm_indices(&self, arm: Arm) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| arm.contains(self.treatment[i]))
            .collect()
    }

    pub fn arm_size(&self, arm: Arm) -> usize {
        self.treatment.iter().filter(|&&w| arm.contains(w)).count()
    }

    /// Errors unless both arms are populated.
    pub fn require_both_arms(&self) -> Result<()> {
        if self.arm_size(Arm::Treated) == 0 || self.arm_size(Arm::Control) == 0 {
            return Err(Error::Invalid(
                "estimand needs at least one treated and one control unit".into(),
            ));
        }
        Ok(())
    }

    /// Covariates reordered to match `names`; used to align an external table.
    pub fn covariates_for(&self, names: &[String]) -> Result<Matrix<T>> {
        let idx: Vec<usize> = names
            .iter()
            .map(|name| {
                self.column_names
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::MissingColumn(name.clone()))
            })
            .collect::<Result<_>>()?;
        let rows: Vec<Vec<T>> = self
            .covariates
            .iter_rows()
            .map(|r| idx.iter().map(|&j| r[j]).collect())
            .collect();
        Ok(Matrix::from_row_major(
            self.n(),
            idx.len(),
            rows.into_iter().flatten().collect(),
        ))
    }
}

/// Reads a table from a CSV file with a header row.
pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, schema: &Schema) -> Result<ObservationTable<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

/// Like [`load_csv`] but from any reader.
pub fn read_csv<T: Scalar, R: Read>(reader: R, schema: &Schema) -> Result<ObservationTable<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let mut seen = HashSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(Error::DuplicateColumn(h.clone()));
        }
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };
    let t_col = find(&schema.treatment)?;
    let y_col = schema.outcome.as_deref().map(find).transpose()?;
    let id_col = schema.id.as_deref().map(find).transpose()?;
    for ex in &schema.exclude {
        find(ex)?;
    }
    let cov_cols: Vec<usize> = match &schema.covariates {
        Some(list) => list.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|&j| {
                j != t_col
                    && Some(j) != y_col
                    && Some(j) != id_col
                    && !schema.exclude.contains(&headers[j])
            })
            .collect(),
    };

    let parse = |col: usize, row: usize, raw: &str| -> Result<f64> {
        if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
            return Err(Error::MissingValue {
                column: headers[col].clone(),
                row,
            });
        }
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::NonNumeric {
                column: headers[col].clone(),
                row,
                value: raw.to_owned(),
            })
    };

    let mut cov = Vec::new();
    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    let mut ids = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let w = parse(t_col, row, field(t_col))?;
        if w == 0.0 {
            treatment.push(false);
        } else if w == 1.0 {
            treatment.push(true);
        } else {
            return Err(Error::NonBinaryTreatment { row, value: w });
        }
        if let Some(j) = y_col {
            outcome.push(T::lit(parse(j, row, field(j))?));
        }
        for &j in &cov_cols {
            cov.push(T::lit(parse(j, row, field(j))?));
        }
        ids.push(match id_col {
            Some(j) => field(j).to_owned(),
            None => (row + 1).to_string(),
        });
    }
    let n = treatment.len();
    let names = cov_cols.iter().map(|&j| headers[j].clone()).collect();
    let table = ObservationTable::new(
        Matrix::from_row_major(n, cov_cols.len(), cov),
        treatment,
        y_col.map(|_| outcome),
        names,
    )?;
    table.with_ids(ids)
}

/// Reads only the named covariate columns of a target-population file. The
/// result has no outcome and marks every unit as control.
pub fn load_target_csv<T: Scalar>(path: impl AsRef<Path>, covariates: &[String]) -> Result<ObservationTable<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let cols: Vec<usize> = covariates
        .iter()
        .map(|c| headers.iter().position(|h| h == c).ok_or_else(|| Error::MissingColumn(c.clone())))
        .collect::<Result<_>>()?;
    let mut cov = Vec::new();
    let mut n = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for &j in &cols {
            let raw = rec.get(j).unwrap_or("");
            let v = raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::NonNumeric {
                column: headers[j].clone(),
                row,
                value: raw.to_owned(),
            })?;
            cov.push(T::lit(v));
        }
        n += 1;
    }
    ObservationTable::new(Matrix::from_row_major(n, cols.len(), cov), vec![false; n], None, covariates.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FOUR_ROWS: &str = "id,w,y,x1,x2\na,1,3.0,1,0\nb,0,1.5,0,1\nc,1,2.0,1,1\nd,0,0.5,0,0\n";

    fn schema() -> Schema {
        Schema {
            id: Some("id".into()),
            ..Schema::new("w").with_outcome("y")
        }
    }

    #[test]
    fn parses_four_row_file() {
        let t: ObservationTable<f64> = read_csv(FOUR_ROWS.as_bytes(), &schema()).unwrap();
        assert_eq!(t.n(), 4);
        assert_eq!(t.d(), 2);
        assert_eq!(t.column_names(), ["x1", "x2"]);
        assert_eq!(t.treatment(), [true, false, true, false]);
        assert_eq!(t.outcome().unwrap(), [3.0, 1.5, 2.0, 0.5]);
        assert_eq!(t.ids(), ["a", "b", "c", "d"]);
        assert_eq!(t.arm_size(Arm::Treated), 2);
    }

    #[test]
    fn rejects_non_binary_treatment() {
        let data = "w,x\n1,0.5\n2,0.1\n";
        let err = read_csv::<f64, _>(data.as_bytes(), &Schema::new("w")).unwrap_err();
        assert!(matches!(err, Error::NonBinaryTreatment { row: 1, .. }));
        assert!(err.to_string().contains("non-binary treatment"));
    }

    #[test]
    fn outcome_is_optional() {
        let data = "w,x\n1,0.5\n0,0.1\n";
        let t = read_csv::<f64, _>(data.as_bytes(), &Schema::new("w")).unwrap();
        assert!(t.outcome().is_none());
    }

    #[test]
    fn rejects_non_numeric_and_missing_cells() {
        let bad = "w,x\n1,abc\n0,0.1\n";
        assert!(matches!(
            read_csv::<f64, _>(bad.as_bytes(), &Schema::new("w")),
            Err(Error::NonNumeric { .. })
        ));
        let missing = "w,x\n1,\n0,0.1\n";
        assert!(matches!(
            read_csv::<f64, _>(missing.as_bytes(), &Schema::new("w")),
            Err(Error::MissingValue { .. })
        ));
    }

    #[test]
    fn rejects_duplicate_headers_and_missing_treatment() {
        let dup = "w,x,x\n1,1,1\n0,0,0\n";
        assert!(matches!(
            read_csv::<f64, _>(dup.as_bytes(), &Schema::new("w")),
            Err(Error::DuplicateColumn(_))
        ));
        let no_w = "t,x\n1,1\n0,0\n";
        assert!(matches!(
            read_csv::<f64, _>(no_w.as_bytes(), &Schema::new("w")),
            Err(Error::MissingColumn(_))
        ));
    }

    #[test]
    fn explicit_covariate_list_and_exclusions() {
        let s = Schema {
            covariates: Some(vec!["x2".into()]),
            ..schema()
        };
        let t: ObservationTable<f64> = read_csv(FOUR_ROWS.as_bytes(), &s).unwrap();
        assert_eq!(t.column_names(), ["x2"]);
        let s = Schema {
            exclude: vec!["x1".into()],
            ..schema()
        };
        let t: ObservationTable<f64> = read_csv(FOUR_ROWS.as_bytes(), &s).unwrap();
        assert_eq!(t.column_names(), ["x2"]);
    }

    #[test]
    fn aligns_external_covariates_by_name() {
        let t: ObservationTable<f64> = read_csv(FOUR_ROWS.as_bytes(), &schema()).unwrap();
        let m = t.covariates_for(&["x2".into(), "x1".into()]).unwrap();
        assert_eq!(m.row(0), [0.0, 1.0]);
        assert!(t.covariates_for(&["x9".into()]).is_err());
    }
}
