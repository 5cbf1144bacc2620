use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("duplicate column name `{0}`")]
    DuplicateColumn(String),
    #[error("non-numeric cell in column `{column}` at row {row}: `{value}`")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },
    #[error("missing value in column `{column}` at row {row}")]
    MissingValue { column: String, row: usize },
    #[error("non-binary treatment value {value} at row {row}")]
    NonBinaryTreatment { row: usize, value: f64 },
    #[error("non-binary covariate `{column}` at row {row}; binary-interaction bases need 0/1 entries")]
    NonBinaryCovariate { column: String, row: usize },
    #[error("basis would produce {requested} columns, above the cap of {cap}")]
    TooManyColumns { requested: usize, cap: usize },
    #[error("invalid basis specification: {0}")]
    InvalidBasis(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("kernel matrix is not symmetric (max asymmetry {0:e})")]
    AsymmetricKernel(f64),
    #[error("kernel matrix is not positive semidefinite (squared imbalance {0:e})")]
    NotPsd(f64),
    #[error("negative weights are not allowed here")]
    NegativeWeights,
    #[error("all weights are zero")]
    ZeroWeights,
    #[error("outcomes are required but the table has none")]
    MissingOutcomes,
    #[error("singular system; collinear columns: {columns:?}{hint}")]
    Singular { columns: Vec<String>, hint: String },
    #[error("the weighted group is empty")]
    EmptyGroup,
    #[error("infeasible problem: {0}")]
    Infeasible(String),
    #[error("instance too large for brute force: {0} free weights (max 8)")]
    TooLarge(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
