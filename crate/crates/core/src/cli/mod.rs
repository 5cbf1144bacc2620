//! Command-line front end.
//!
//! Every command loads a [`RunConfig`], computes its result completely and
//! only then writes artifacts, so an input error leaves nothing behind.
//! Exit codes: 0 success, 1 input error, 2 non-convergence (artifacts are
//! still written), 3 failed verification.

pub mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::dataset::{build_features, load_csv, load_target_csv, Arm};
use crate::dual::fit_weights;
use crate::error::{Error, Result};
use crate::estimators::{build_balance_target, estimate_effect, EffectEstimate, EstimandSpec, EstimationConfig, Imputation, Oracle};
use crate::imbalance::{BalanceTarget, ImbalanceReport, WeightVector};
use crate::io::write_atomic;
use crate::kernel::{gram, pilot_sigma2, solve_kernel_minimax, KernelSpec, KernelWeightProblem};
use crate::simlab::{check_duality, convergence_experiment, coverage_experiment};
use crate::{FeatureMatrix, ObservationTable};

pub use config::{KernelConfig, OracleConfig, RunConfig, SimulationConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "balancing", version, about = "Balancing weights and treatment-effect estimates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Input CSV with covariates, treatment and outcome.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for artifacts; nothing is written without it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit balancing weights for one arm.
    Weights,
    /// Balance diagnostics for uniform or supplied weights.
    Balance {
        /// CSV with columns `id,weight`; uniform arm weights when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Point estimate, variance and Wald interval.
    Estimate,
    /// Compare dual solutions with direct primal solves on random instances.
    CheckDuality,
    /// Run the experiment or generator in the `simulation` section.
    Simulate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    NotConverged,
    VerificationFailed,
}

impl Status {
    pub fn code(self) -> u8 {
        match self {
            Status::Ok => 0,
            Status::NotConverged => 2,
            Status::VerificationFailed => 3,
        }
    }
}

/// An artifact file and its contents.
struct Artifact {
    name: String,
    bytes: Vec<u8>,
}

struct Outcome {
    status: Status,
    text: String,
    json: serde_json::Value,
    artifacts: Vec<Artifact>,
}

#[derive(Serialize)]
struct Envelope<'a, R: Serialize> {
    command: &'a str,
    version: &'a str,
    config: &'a RunConfig,
    result: &'a R,
}

fn json_artifact<R: Serialize>(name: &str, command: &str, cfg: &RunConfig, result: &R) -> Result<Artifact> {
    let env = Envelope {
        command,
        version: VERSION,
        config: cfg,
        result,
    };
    let mut bytes = serde_json::to_vec_pretty(&env)?;
    bytes.push(b'\n');
    Ok(Artifact {
        name: name.into(),
        bytes,
    })
}

fn text_artifact(name: &str, text: &str) -> Artifact {
    Artifact {
        name: name.into(),
        bytes: text.as_bytes().to_vec(),
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(status) => ExitCode::from(status.code()),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Runs one command and writes its artifacts.
pub fn run(cli: &Cli) -> Result<Status> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Invalid("--threads must be at least 1".into()));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let cfg = RunConfig::load(cli.config.as_deref())?.resolve(cli.data.as_deref(), cli.seed);
    let outcome = match &cli.command {
        Command::Weights => weights(&cfg)?,
        Command::Balance { weights } => balance(&cfg, weights.as_deref())?,
        Command::Estimate => estimate(&cfg)?,
        Command::CheckDuality => duality(&cfg)?,
        Command::Simulate => simulate(&cfg)?,
    };
    if let Some(dir) = &cli.out {
        for a in &outcome.artifacts {
            write_atomic(&dir.join(&a.name), &a.bytes)?;
        }
    }
    let shown = match cli.format {
        Format::Text => outcome.text.clone(),
        Format::Json => serde_json::to_string_pretty(&outcome.json)? + "\n",
    };
    let _ = std::io::Write::write_all(&mut std::io::stdout().lock(), shown.as_bytes());
    if outcome.status == Status::NotConverged {
        eprintln!("warning: solver did not converge");
    }
    Ok(outcome.status)
}

fn data_path(cfg: &RunConfig) -> Result<&str> {
    cfg.data
        .as_deref()
        .ok_or_else(|| Error::Invalid("this command needs --data".into()))
}

fn load(cfg: &RunConfig) -> Result<(ObservationTable, FeatureMatrix)> {
    let table: ObservationTable = load_csv(data_path(cfg)?, &cfg.schema)?;
    let fm = build_features(&table, &cfg.basis)?;
    Ok((table, fm))
}

fn external_table(cfg: &RunConfig, table: &ObservationTable) -> Result<Option<ObservationTable>> {
    let path = match (&cfg.target_data, &cfg.estimand) {
        (Some(p), _) => p.clone(),
        (None, EstimandSpec::TargetPopulationMean { data }) => data.clone(),
        _ => return Ok(None),
    };
    load_target_csv(&path, table.column_names()).map(Some)
}

fn weights_csv(table: &ObservationTable, g: &WeightVector<f64>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "weight"])?;
    for (id, v) in table.ids().iter().zip(g.values()) {
        w.write_record([id.clone(), format!("{v:?}")])?;
    }
    w.into_inner().map_err(|e| Error::Invalid(format!("csv buffer: {e}")))
}

#[derive(Serialize)]
struct KernelResult<'a> {
    kernel: KernelSpec,
    sigma2: f64,
    solution: &'a crate::kernel::KernelSolution<f64>,
}

fn weights(cfg: &RunConfig) -> Result<Outcome> {
    let (table, fm) = load(cfg)?;
    let external = external_table(cfg, &table)?;
    let target = build_balance_target(&cfg.estimand, &table, &fm, external.as_ref())?;
    let (g, converged, solution_json, k) = match &cfg.kernel {
        Some(kc) => {
            let (g, conv, json, k) = kernel_weights(cfg, kc, &table, &target.imputation)?;
            (g, conv, json, Some(k))
        }
        None => {
            let sol = fit_weights(&fm, table.treatment(), cfg.arm, &target.balance, &cfg.weighting)?;
            let json = json_artifact("solution.json", "weights", cfg, &sol)?;
            (sol.weights.clone(), sol.converged, json, None)
        }
    };
    let report = ImbalanceReport::compute(&fm, &table, &g, &target.balance, k.as_ref())?;
    let mut text = report.to_text();
    text += &format!("converged: {converged}\n");
    Ok(Outcome {
        status: if converged { Status::Ok } else { Status::NotConverged },
        json: serde_json::json!({ "converged": converged, "balance": &report }),
        artifacts: vec![
            Artifact {
                name: "weights.csv".into(),
                bytes: weights_csv(&table, &g)?,
            },
            solution_json,
            json_artifact("balance.json", "weights", cfg, &report)?,
            text_artifact("balance.txt", &text),
        ],
        text,
    })
}

fn kernel_weights(
    cfg: &RunConfig,
    kc: &KernelConfig,
    table: &ObservationTable,
    imputation: &Imputation<f64>,
) -> Result<(WeightVector<f64>, bool, Artifact, crate::Matrix)> {
    let omega = match imputation {
        Imputation::Sample(w) => w.clone(),
        Imputation::Means(_) => {
            return Err(Error::Invalid(
                "kernel weights support in-sample estimands only (treated-mean, control-mean, ate, att)".into(),
            ))
        }
    };
    let x = table.covariates();
    let spec = kc.spec.resolved(x)?;
    let sigma2 = match kc.sigma2 {
        Some(s) => s,
        None => {
            let y = table.outcome().ok_or_else(|| {
                Error::Invalid("kernel weights need an explicit sigma2 when the data have no outcome".into())
            })?;
            pilot_sigma2(x, table.treatment(), y, cfg.arm)?
        }
    };
    let k = gram(&spec, x)?;
    let prob = KernelWeightProblem::new(k.clone(), table.treatment().to_vec(), sigma2, kc.constraints)
        .with_arm(cfg.arm)
        .with_target(omega);
    let sol = solve_kernel_minimax(&prob)?;
    let json = json_artifact(
        "solution.json",
        "weights",
        cfg,
        &KernelResult {
            kernel: spec,
            sigma2,
            solution: &sol,
        },
    )?;
    Ok((sol.weights.clone(), sol.converged, json, k))
}

fn read_weights(path: &Path, table: &ObservationTable, arm: Arm) -> Result<WeightVector<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut by_id = BTreeMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or("").to_owned();
        let raw = rec.get(1).unwrap_or("");
        let v = raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::NonNumeric {
            column: "weight".into(),
            row,
            value: raw.to_owned(),
        })?;
        if by_id.insert(id.clone(), v).is_some() {
            return Err(Error::Invalid(format!("duplicate unit id `{id}` in weights file")));
        }
    }
    let values = table
        .ids()
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("weights file has no entry for unit `{id}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    WeightVector::new(values, table.treatment(), arm)
}

fn balance(cfg: &RunConfig, weights: Option<&Path>) -> Result<Outcome> {
    let (table, fm) = load(cfg)?;
    let g = match weights {
        Some(p) => read_weights(p, &table, cfg.arm)?,
        None => WeightVector::uniform(table.treatment(), cfg.arm)?,
    };
    let external = external_table(cfg, &table)?;
    let target: BalanceTarget<f64> = build_balance_target(&cfg.estimand, &table, &fm, external.as_ref())?.balance;
    let k = cfg
        .kernel
        .as_ref()
        .map(|kc| gram(&kc.spec, table.covariates()))
        .transpose()?;
    let report = ImbalanceReport::compute(&fm, &table, &g, &target, k.as_ref())?;
    let text = report.to_text();
    Ok(Outcome {
        status: Status::Ok,
        json: serde_json::to_value(&report)?,
        artifacts: vec![
            json_artifact("balance.json", "balance", cfg, &report)?,
            text_artifact("balance.txt", &text),
        ],
        text,
    })
}

fn oracle(cfg: &RunConfig, table: &ObservationTable) -> Result<Option<Oracle<f64>>> {
    let Some(oc) = &cfg.oracle else { return Ok(None) };
    let cols = load_target_csv::<f64>(data_path(cfg)?, &[oc.m1.clone(), oc.m0.clone()])?;
    if cols.n() != table.n() {
        return Err(Error::Dimension("oracle columns and data disagree on n".into()));
    }
    let x = cols.covariates();
    let m1: Vec<f64> = (0..x.rows()).map(|i| x[(i, 0)]).collect();
    let m0: Vec<f64> = (0..x.rows()).map(|i| x[(i, 1)]).collect();
    let mean = |v: &[f64]| crate::scalar::compensated_sum(v.iter().copied()) / v.len() as f64;
    Ok(Some(Oracle {
        mu1: oc.mu1.unwrap_or_else(|| mean(&m1)),
        mu0: oc.mu0.unwrap_or_else(|| mean(&m0)),
        m1,
        m0,
    }))
}

pub fn estimate_text(e: &EffectEstimate) -> String {
    let mut s = format!("estimate {:.6}  variance {:.6e}\n", e.point, e.variance);
    match e.ci {
        Some([lo, hi]) => s += &format!("{:.1}% interval [{lo:.6}, {hi:.6}]\n", 100.0 * e.level),
        None => s += "no interval: variance estimate is zero\n",
    }
    s += &format!("rms weight {:.6}\n", e.gamma_rms);
    for c in &e.components {
        s += &format!(
            "{:<8} weighting {:.6}  correction {:.6}  converged {}\n",
            c.arm.name(),
            c.weighting,
            c.correction,
            c.converged
        );
    }
    for (arm, ess) in &e.ess {
        s += &format!("effective sample size ({arm}) {ess:.2}\n");
    }
    if let Some(d) = &e.error_decomposition {
        s += &format!(
            "error {:.6} = imbalance {:.6} + noise {:.6} + sampling {:.6}\n",
            d.total, d.imbalance, d.noise, d.sampling
        );
    }
    for (arm, r) in &e.imbalance_after {
        s += &format!("balance after weighting ({arm})\n{}", r.to_text());
    }
    s
}

fn estimate(cfg: &RunConfig) -> Result<Outcome> {
    let (table, fm) = load(cfg)?;
    let external = external_table(cfg, &table)?;
    let oracle = oracle(cfg, &table)?;
    let ecfg = EstimationConfig {
        estimand: cfg.estimand.clone(),
        weighting: cfg.weighting,
        outcome: cfg.outcome,
        level: cfg.level,
        normalize: cfg.normalize,
    };
    let est = estimate_effect(&table, &fm, &ecfg, external.as_ref(), oracle.as_ref())?;
    let text = estimate_text(&est);
    Ok(Outcome {
        status: if est.converged() { Status::Ok } else { Status::NotConverged },
        json: serde_json::to_value(&est)?,
        artifacts: vec![
            json_artifact("estimate.json", "estimate", cfg, &est)?,
            text_artifact("estimate.txt", &text),
        ],
        text,
    })
}

fn duality(cfg: &RunConfig) -> Result<Outcome> {
    let report = check_duality(&cfg.duality)?;
    let text = report.to_text();
    Ok(Outcome {
        status: if report.all_pass { Status::Ok } else { Status::VerificationFailed },
        json: serde_json::to_value(&report)?,
        artifacts: vec![
            json_artifact("duality.json", "check-duality", cfg, &report)?,
            text_artifact("duality.txt", &text),
        ],
        text,
    })
}

#[derive(Serialize)]
struct Truth {
    mu1: f64,
    mu0: f64,
    tau: f64,
    n: usize,
}

fn simulate(cfg: &RunConfig) -> Result<Outcome> {
    let sim = cfg
        .simulation
        .as_ref()
        .ok_or_else(|| Error::Invalid("simulate needs a `simulation` section in the config".into()))?;
    let res = match sim {
        SimulationConfig::Convergence(c) => convergence_experiment(c)?,
        SimulationConfig::Coverage(c) => coverage_experiment(c)?,
        SimulationConfig::Dataset { dgp } => {
            let data = dgp.compile()?.sample(dgp.n, 0)?;
            let truth = Truth {
                mu1: data.mu1,
                mu0: data.mu0,
                tau: data.tau(),
                n: dgp.n,
            };
            let mut w = csv::Writer::from_writer(Vec::new());
            data.write_csv_to(&mut w)?;
            let csv_bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv buffer: {e}")))?;
            let text = format!("generated {} units; mu1 {:.6}, mu0 {:.6}, tau {:.6}\n", dgp.n, truth.mu1, truth.mu0, truth.tau);
            return Ok(Outcome {
                status: Status::Ok,
                json: serde_json::to_value(&truth)?,
                artifacts: vec![
                    Artifact {
                        name: "data.csv".into(),
                        bytes: csv_bytes,
                    },
                    json_artifact("truth.json", "simulate", cfg, &truth)?,
                ],
                text,
            });
        }
    };
    let text = res.to_text();
    Ok(Outcome {
        status: Status::Ok,
        json: serde_json::to_value(&res)?,
        artifacts: vec![
            json_artifact("simulation.json", "simulate", cfg, &res)?,
            text_artifact("simulation.txt", &text),
        ],
        text,
    })
}
