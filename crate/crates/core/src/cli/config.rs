//! The JSON run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Arm, BasisSpec, Schema};
use crate::dual::WeightingConfig;
use crate::error::{Error, Result};
use crate::estimators::{EstimandSpec, OutcomeConfig};
use crate::kernel::{KernelConstraints, KernelSpec};
use crate::simlab::{ConvergenceConfig, CoverageConfig, DGPSpec, DualityCheckConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub spec: KernelSpec,
    /// Required without outcomes; otherwise defaults to the pilot residual variance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    #[serde(default)]
    pub constraints: KernelConstraints,
}

/// Column names holding the true conditional means in a simulated table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_m1")]
    pub m1: String,
    #[serde(default = "default_m0")]
    pub m0: String,
    /// Population means; default to the sample means of the oracle columns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu0: Option<f64>,
}

fn default_m1() -> String {
    "m1".into()
}

fn default_m0() -> String {
    "m0".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SimulationConfig {
    Convergence(ConvergenceConfig),
    Coverage(CoverageConfig),
    /// Writes one generated table with its ground truth.
    Dataset { dgp: DGPSpec },
}

/// Everything a command needs. Sections a command does not use are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: Schema,
    pub basis: BasisSpec,
    pub weighting: WeightingConfig,
    pub estimand: EstimandSpec,
    /// Arm weighted by the `weights` command.
    pub arm: Arm,
    pub outcome: OutcomeConfig,
    pub level: f64,
    pub normalize: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleConfig>,
    /// External table for the target-population estimand; defaults to the
    /// path inside the estimand.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_data: Option<String>,
    pub duality: DualityCheckConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationConfig>,
    /// When set, replaces every nested seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: Schema {
                treatment: "w".into(),
                outcome: Some("y".into()),
                ..Schema::default()
            },
            basis: BasisSpec::linear(),
            weighting: WeightingConfig::default(),
            estimand: EstimandSpec::TreatedMean,
            arm: Arm::Treated,
            outcome: OutcomeConfig::default(),
            level: 0.95,
            normalize: false,
            kernel: None,
            oracle: None,
            target_data: None,
            duality: DualityCheckConfig::default(),
            simulation: None,
            seed: None,
            data: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Ok(serde_json::from_str(&text)?)
            }
        }
    }

    /// Applies flag overrides and propagates the top-level seed.
    pub fn resolve(mut self, data: Option<&Path>, seed: Option<u64>) -> Self {
        if let Some(d) = data {
            self.data = Some(d.display().to_string());
        }
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(s) = self.seed {
            self.outcome.seed = s;
            self.duality.seed = s;
            if let EstimandSpec::CateAtPoint { seed, .. } = &mut self.estimand {
                *seed = s;
            }
            match &mut self.simulation {
                Some(SimulationConfig::Convergence(c)) => c.dgp.seed = s,
                Some(SimulationConfig::Coverage(c)) => {
                    c.dgp.seed = s;
                    c.estimation.outcome.seed = s;
                }
                Some(SimulationConfig::Dataset { dgp }) => dgp.seed = s,
                None => {}
            }
        }
        self
    }
}
