//! Synthetic data with known propensity and outcome functions, brute-force
//! oracles and Monte Carlo experiments.

mod brute;
mod duality;
mod experiments;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{basis_terms, Arm, BasisSpec, ObservationTable, Term};
use crate::error::{Error, Result};
use crate::imbalance::WeightVector;
use crate::linalg::Matrix;

pub use brute::{brute_force_weights, minimax_objective, BruteDomain, BruteForceResult, MAX_FREE_WEIGHTS};
pub use duality::{check_duality, random_duality_instance, DualityCheckConfig, DualityCheckReport, DualityInstance, DualityPair, DualityRow};
pub use experiments::{
    convergence_experiment, coverage_experiment, ConvergenceConfig, CoverageConfig, SimResult, SizeSummary,
};

/// Seeded generator for replication `stream` of an experiment.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CovariateLaw {
    /// iid uniform on `[0, 1]`.
    Uniform,
    /// iid standard normal.
    Normal,
    /// iid Bernoulli with success probability `p`.
    Bernoulli { p: f64 },
}

impl CovariateLaw {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Self::Uniform => rng.gen::<f64>(),
            Self::Normal => StandardNormal.sample(rng),
            Self::Bernoulli { p } => f64::from(u8::from(rng.gen::<f64>() < p)),
        }
    }

    /// `E[x^k]`.
    fn raw_moment(&self, k: u32) -> f64 {
        if k == 0 {
            return 1.0;
        }
        match *self {
            Self::Uniform => 1.0 / f64::from(k + 1),
            Self::Normal if k % 2 == 1 => 0.0,
            Self::Normal => (1..k).step_by(2).map(f64::from).product(),
            Self::Bernoulli { p } => p,
        }
    }

    fn hermite_moment(&self, k: u32) -> f64 {
        hermite_coefficients(k)
            .iter()
            .enumerate()
            .map(|(j, c)| c * self.raw_moment(j as u32))
            .sum()
    }
}

/// Monomial coefficients of `He_k`, lowest degree first.
fn hermite_coefficients(k: u32) -> Vec<f64> {
    let mut prev = vec![1.0];
    if k == 0 {
        return prev;
    }
    let mut cur = vec![0.0, 1.0];
    for m in 1..k {
        let mut next = vec![0.0; cur.len() + 1];
        for (j, c) in cur.iter().enumerate() {
            next[j + 1] += c;
        }
        for (j, c) in prev.iter().enumerate() {
            next[j] -= f64::from(m) * c;
        }
        prev = cur;
        cur = next;
    }
    cur
}

/// `Σ_j β_j φ_j(x)` over the raw (unstandardized) columns of a basis,
/// coefficients keyed by column label. Missing labels have coefficient 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearIndex {
    pub basis: BasisSpec,
    pub coefficients: BTreeMap<String, f64>,
}

impl LinearIndex {
    pub fn linear(coefficients: &[(&str, f64)]) -> Self {
        Self {
            basis: BasisSpec::linear(),
            coefficients: coefficients.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
        }
    }

    fn compile(&self, names: &[String]) -> Result<CompiledIndex> {
        let (terms, labels, _) = basis_terms(&self.basis, names)?;
        for key in self.coefficients.keys() {
            if !labels.contains(key) {
                return Err(Error::Invalid(format!("coefficient for unknown column `{key}`")));
            }
            if !self.coefficients[key].is_finite() {
                return Err(Error::Invalid(format!("coefficient for `{key}` is not finite")));
            }
        }
        let coefs = labels
            .iter()
            .map(|l| self.coefficients.get(l).copied().unwrap_or(0.0))
            .collect();
        Ok(CompiledIndex { terms, coefs })
    }
}

#[derive(Debug, Clone)]
struct CompiledIndex {
    terms: Vec<Term>,
    coefs: Vec<f64>,
}

impl CompiledIndex {
    fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().zip(&self.coefs).map(|(t, c)| c * t.eval(x)).sum()
    }

    fn mean(&self, law: &CovariateLaw) -> f64 {
        self.terms
            .iter()
            .zip(&self.coefs)
            .map(|(t, c)| {
                c * t
                    .factors
                    .iter()
                    .map(|&(_, k)| if t.hermite { law.hermite_moment(k) } else { law.raw_moment(k) })
                    .product::<f64>()
            })
            .sum()
    }
}

/// Data-generating process with known `e(x)`, `m1(x)` and `m0(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DGPSpec {
    pub n: usize,
    pub d: usize,
    pub covariates: CovariateLaw,
    /// Logistic index of the propensity score.
    pub propensity: LinearIndex,
    pub outcome_treated: LinearIndex,
    pub outcome_control: LinearIndex,
    pub sigma_y: f64,
    /// The propensity index is clipped to `[logit ε, logit(1 − ε)]`.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_epsilon() -> f64 {
    0.02
}

/// A validated [`DGPSpec`] ready to evaluate and sample.
#[derive(Debug, Clone)]
pub struct Dgp {
    spec: DGPSpec,
    names: Vec<String>,
    e: CompiledIndex,
    m1: CompiledIndex,
    m0: CompiledIndex,
}

impl DGPSpec {
    pub fn covariate_names(&self) -> Vec<String> {
        (1..=self.d).map(|j| format!("x{j}")).collect()
    }

    pub fn compile(&self) -> Result<Dgp> {
        if self.n < 2 || self.d == 0 {
            return Err(Error::Invalid(format!("need n >= 2 and d >= 1, got n = {}, d = {}", self.n, self.d)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Invalid(format!("overlap bound {} must lie in (0, 0.5)", self.epsilon)));
        }
        if !(self.sigma_y >= 0.0 && self.sigma_y.is_finite()) {
            return Err(Error::Invalid(format!("sigma_y = {} must be finite and >= 0", self.sigma_y)));
        }
        if let CovariateLaw::Bernoulli { p } = self.covariates {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Invalid(format!("bernoulli p = {p} must lie in (0, 1)")));
            }
        }
        let names = self.covariate_names();
        Ok(Dgp {
            e: self.propensity.compile(&names)?,
            m1: self.outcome_treated.compile(&names)?,
            m0: self.outcome_control.compile(&names)?,
            names,
            spec: self.clone(),
        })
    }
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Dgp {
    pub fn spec(&self) -> &DGPSpec {
        &self.spec
    }

    pub fn propensity(&self, x: &[f64]) -> f64 {
        let eps = self.spec.epsilon;
        logistic(self.e.eval(x).clamp(logit(eps), logit(1.0 - eps)))
    }

    pub fn m1(&self, x: &[f64]) -> f64 {
        self.m1.eval(x)
    }

    pub fn m0(&self, x: &[f64]) -> f64 {
        self.m0.eval(x)
    }

    /// `E[m1(X)]`, exact from the covariate moments.
    pub fn mu1(&self) -> f64 {
        self.m1.mean(&self.spec.covariates)
    }

    pub fn mu0(&self) -> f64 {
        self.m0.mean(&self.spec.covariates)
    }

    /// Draws a sample of size `n` from stream `stream` of the spec's seed.
    pub fn sample(&self, n: usize, stream: u64) -> Result<SimData> {
        let mut rng = rng_for(self.spec.seed, stream);
        let d = self.spec.d;
        let mut x = Vec::with_capacity(n * d);
        let mut w = Vec::with_capacity(n);
        let (mut e, mut m1, mut m0, mut y1, mut y0, mut y) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for _ in 0..n {
            let xi: Vec<f64> = (0..d).map(|_| self.spec.covariates.draw(&mut rng)).collect();
            let ei = self.propensity(&xi);
            let wi = rng.gen::<f64>() < ei;
            let (a, b) = (self.m1(&xi), self.m0(&xi));
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z0: f64 = StandardNormal.sample(&mut rng);
            let (p1, p0) = (a + self.spec.sigma_y * z1, b + self.spec.sigma_y * z0);
            x.extend_from_slice(&xi);
            w.push(wi);
            e.push(ei);
            m1.push(a);
            m0.push(b);
            y1.push(p1);
            y0.push(p0);
            y.push(if wi { p1 } else { p0 });
        }
        let table = ObservationTable::new(Matrix::from_row_major(n, d, x), w, Some(y), self.names.clone())?;
        Ok(SimData {
            table,
            e,
            m1,
            m0,
            y1,
            y0,
            mu1: self.mu1(),
            mu0: self.mu0(),
        })
    }
}

/// A generated sample and its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimData {
    pub table: ObservationTable<f64>,
    pub e: Vec<f64>,
    pub m1: Vec<f64>,
    pub m0: Vec<f64>,
    /// Potential outcomes; the observed outcome is the one selected by treatment.
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    pub mu1: f64,
    pub mu0: f64,
}

impl SimData {
    pub fn tau(&self) -> f64 {
        self.mu1 - self.mu0
    }

    /// CSV with covariates, `w`, `y` and the ground-truth columns `e`, `m1`, `m0`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = csv::Writer::from_writer(Vec::new());
        self.write_csv_to(&mut out)?;
        let bytes = out.into_inner().map_err(|e| Error::Invalid(format!("csv buffer: {e}")))?;
        crate::io::write_atomic(path, &bytes)
    }

    pub fn write_csv_to<W: std::io::Write>(&self, out: &mut csv::Writer<W>) -> Result<()> {
        let mut header: Vec<String> = self.table.column_names().to_vec();
        header.extend(["w", "y", "e", "m1", "m0"].map(String::from));
        out.write_record(&header)?;
        let y = self.table.outcome().expect("simulated tables have outcomes");
        for i in 0..self.table.n() {
            let mut rec: Vec<String> = self.table.covariates().row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(u8::from(self.table.treatment()[i]).to_string());
            for v in [y[i], self.e[i], self.m1[i], self.m0[i]] {
                rec.push(format!("{v:?}"));
            }
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::Invalid(format!("csv buffer: {e}")))?;
        Ok(())
    }
}

/// `1/e(X_i)` on treated units, or `1/(1 − e(X_i))` on control units.
pub fn oracle_weights(e: &[f64], treatment: &[bool], arm: Arm) -> Result<WeightVector<f64>> {
    let values = e
        .iter()
        .zip(treatment)
        .map(|(&p, &t)| match (arm, arm.contains(t)) {
            (_, false) => 0.0,
            (Arm::Treated, true) => 1.0 / p,
            (Arm::Control, true) => 1.0 / (1.0 - p),
        })
        .collect();
    WeightVector::new(values, treatment, arm)
}
