//! Acceptance checks. Runs without the libtest harness so every criterion
//! prints one pass/fail line; exits nonzero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use balancing::dataset::{Arm, BasisSpec, FeatureMatrix, ObservationTable, INTERCEPT_LABEL};
use balancing::dual::{
    solve_dual, solve_minimax_l2, DispersionSpec, MinimaxOptions, PenaltyKind, PenaltySpec, SolverOptions,
    WeightingConfig,
};
use balancing::estimators::{
    aipw_estimate, estimate_effect, hajek_normalize, ipw_estimate, EstimandSpec, EstimationConfig, Oracle,
    OutcomeModel,
};
use balancing::imbalance::{constraint_residual, feature_imbalance, imbalance_l2ball, kernel_imbalance, BalanceTarget, WeightVector};
use balancing::kernel::{gram, solve_kernel_minimax, KernelConstraints, KernelSpec, KernelWeightProblem};
use balancing::linalg::Matrix;
use balancing::simlab::{
    brute_force_weights, check_duality, convergence_experiment, coverage_experiment, minimax_objective,
    random_duality_instance, rng_for, BruteDomain, ConvergenceConfig, CovariateLaw, CoverageConfig, DGPSpec,
    DualityCheckConfig, LinearIndex,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_table(rng: &mut impl Rng, n: usize, d: usize, with_outcome: bool) -> ObservationTable<f64> {
    loop {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| normal(rng)).collect()).collect();
        let treatment: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < 0.5).collect();
        let n1 = treatment.iter().filter(|&&t| t).count();
        if n1 < 2 || n1 > n - 2 {
            continue;
        }
        let y = with_outcome.then(|| rows.iter().map(|r| r.iter().sum::<f64>() + normal(rng)).collect());
        let names = (1..=d).map(|j| format!("x{j}")).collect();
        return ObservationTable::new(Matrix::from_rows(&rows), treatment, y, names).unwrap();
    }
}

/// Intercept plus raw covariates, every column with a finite scale.
fn finite_features(rng: &mut impl Rng, table: &ObservationTable<f64>) -> FeatureMatrix<f64> {
    let n = table.n();
    let d = table.d();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| std::iter::once(1.0).chain(table.covariates().row(i).iter().copied()).collect())
        .collect();
    let labels = std::iter::once(INTERCEPT_LABEL.to_string())
        .chain(table.column_names().iter().cloned())
        .collect();
    let scales = (0..=d).map(|_| rng.gen_range(0.2..3.0)).collect();
    FeatureMatrix::new(Matrix::from_rows(&rows), scales, labels, Some(0)).unwrap()
}

fn c1_duality() -> Verdict {
    let report = check_duality(&DualityCheckConfig::default()).unwrap();
    let worst = report.summary.iter().fold(0.0f64, |m, p| m.max(p.max_discrepancy));
    let pairs: Vec<String> = report
        .summary
        .iter()
        .map(|p| format!("{} {}/{}", p.pair, p.instances - p.failures, p.instances))
        .collect();
    verdict(
        report.all_pass && report.summary.iter().all(|p| p.instances == 100),
        format!("max discrepancy {worst:.2e} < 1e-6; {}", pairs.join(", ")),
    )
}

fn c2_kernel_trick() -> Verdict {
    let mut worst = 0.0f64;
    for k in 0..1000u64 {
        let mut rng = rng_for(202, k);
        let n = rng.gen_range(4..40);
        let d = rng.gen_range(1..6);
        let table = random_table(&mut rng, n, d, false);
        let fm = finite_features(&mut rng, &table);
        let arm = if rng.gen::<bool>() { Arm::Treated } else { Arm::Control };
        let values: Vec<f64> = table
            .treatment()
            .iter()
            .map(|&t| if arm.contains(t) { rng.gen_range(-1.0..4.0) } else { 0.0 })
            .collect();
        let g = WeightVector::new(values, table.treatment(), arm).unwrap();
        let target = BalanceTarget::full_sample(&fm);
        let dvec = feature_imbalance(&fm, table.treatment(), &g, &target).unwrap();
        let basis_form = imbalance_l2ball(&dvec, fm.scales()).unwrap();
        // Linear kernel on Φ Λ: K = Φ Λ² Φᵀ.
        let scaled: Vec<Vec<f64>> = (0..n)
            .map(|i| fm.values().row(i).iter().zip(fm.scales()).map(|(v, l)| v * l).collect())
            .collect();
        let k = gram(&KernelSpec::Linear, &Matrix::from_rows(&scaled)).unwrap();
        let kernel_form = kernel_imbalance(&k, table.treatment(), &g).unwrap();
        worst = worst.max((kernel_form - basis_form).abs() / basis_form.max(1.0));
    }
    verdict(worst <= 1e-10, format!("1000 instances, max relative gap {worst:.2e} <= 1e-10"))
}

fn kernel_objective(k: &Matrix<f64>, treatment: &[bool], arm: Arm, omega: &[f64], sigma2: f64, group: &[f64]) -> f64 {
    let n = treatment.len();
    let mut v = omega.to_vec();
    let mut a = 0;
    for i in 0..n {
        if arm.contains(treatment[i]) {
            v[i] -= group[a];
            a += 1;
        }
    }
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            q += v[i] * k[(i, j)] * v[j];
        }
    }
    (q + sigma2 * group.iter().map(|x| x * x).sum::<f64>()) / (n * n) as f64
}

fn small_arm_table(rng: &mut impl Rng) -> ObservationTable<f64> {
    loop {
        let n = rng.gen_range(8..20);
        let d = rng.gen_range(1..4);
        let t = random_table(rng, n, d, false);
        let n1 = t.arm_size(Arm::Treated);
        if (2..=8).contains(&n1) {
            return t;
        }
    }
}

fn c3_brute_force() -> Verdict {
    let mut worst = 0.0f64;
    let mut count = 0;
    for k in 0..50u64 {
        let mut rng = rng_for(303, k);
        let table = small_arm_table(&mut rng);
        let n = table.n();
        let n1 = table.arm_size(Arm::Treated);
        let sigma2 = rng.gen_range(0.1..2.0);
        let idx = table.arm_indices(Arm::Treated);
        let center = n as f64 / n1 as f64;
        let (solver, brute) = match k % 3 {
            0 => {
                let fm = finite_features(&mut rng, &table);
                let target = BalanceTarget::full_sample(&fm);
                let sol = solve_minimax_l2(&fm, table.treatment(), &target, sigma2, &MinimaxOptions::default()).unwrap();
                let f = minimax_objective(&fm, table.treatment(), &target, sigma2).unwrap();
                let group: Vec<f64> = idx.iter().map(|&i| sol.weights.values()[i]).collect();
                let b = brute_force_weights(n1, &f, BruteDomain::Free { center, radius: 3.0 * center }, k).unwrap();
                (f(&group), b.objective)
            }
            r => {
                let spec = KernelSpec::Gaussian { bandwidth: Some(rng.gen_range(0.5..2.0)) };
                let kmat = gram(&spec, table.covariates()).unwrap();
                let constraints = if r == 1 { KernelConstraints::None } else { KernelConstraints::Simplex };
                let prob = KernelWeightProblem::new(kmat.clone(), table.treatment().to_vec(), sigma2, constraints);
                let sol = solve_kernel_minimax(&prob).unwrap();
                let omega = vec![1.0; n];
                let f = |g: &[f64]| kernel_objective(&kmat, table.treatment(), Arm::Treated, &omega, sigma2, g);
                let group: Vec<f64> = idx.iter().map(|&i| sol.weights.values()[i]).collect();
                let domain = if r == 1 {
                    BruteDomain::Free { center, radius: 3.0 * center }
                } else {
                    BruteDomain::Simplex { total: n as f64 }
                };
                let b = brute_force_weights(n1, f, domain, k).unwrap();
                (f(&group), b.objective)
            }
        };
        worst = worst.max((solver - brute).abs());
        count += 1;
    }
    verdict(worst <= 1e-4, format!("{count} instances, max objective gap {worst:.2e} <= 1e-4"))
}

/// Least-squares fit of `y` on `[1, x]` over the treated units via normal
/// equations and Gaussian elimination with partial pivoting.
fn ols_imputation_mean(table: &ObservationTable<f64>) -> f64 {
    let d = table.d();
    let p = d + 1;
    let y = table.outcome().unwrap();
    let row = |i: usize| -> Vec<f64> { std::iter::once(1.0).chain(table.covariates().row(i).iter().copied()).collect() };
    let mut a = vec![vec![0.0; p + 1]; p];
    for i in table.arm_indices(Arm::Treated) {
        let r = row(i);
        for j in 0..p {
            for l in 0..p {
                a[j][l] += r[j] * r[l];
            }
            a[j][p] += r[j] * y[i];
        }
    }
    for c in 0..p {
        let piv = (c..p).max_by(|&u, &v| a[u][c].abs().total_cmp(&a[v][c].abs())).unwrap();
        a.swap(c, piv);
        for r in 0..p {
            if r != c {
                let f = a[r][c] / a[c][c];
                for l in c..=p {
                    a[r][l] -= f * a[c][l];
                }
            }
        }
    }
    let beta: Vec<f64> = (0..p).map(|j| a[j][p] / a[j][j]).collect();
    (0..table.n())
        .map(|i| row(i).iter().zip(&beta).map(|(u, b)| u * b).sum::<f64>())
        .sum::<f64>()
        / table.n() as f64
}

fn c4_regression_equivalence() -> Verdict {
    let mut worst = 0.0f64;
    for k in 0..20u64 {
        let mut rng = rng_for(404, k);
        let table = loop {
            let n = rng.gen_range(30..80);
            let d = rng.gen_range(1..4);
            let t = random_table(&mut rng, n, d, true);
            if t.arm_size(Arm::Treated) > d + 3 {
                break t;
            }
        };
        let rows: Vec<Vec<f64>> = (0..table.n())
            .map(|i| std::iter::once(1.0).chain(table.covariates().row(i).iter().copied()).collect())
            .collect();
        let kmat = gram(&KernelSpec::Linear, &Matrix::from_rows(&rows)).unwrap();
        let prob = KernelWeightProblem::new(kmat, table.treatment().to_vec(), 0.0, KernelConstraints::None);
        let sol = solve_kernel_minimax(&prob).unwrap();
        let weighting = ipw_estimate(&table, &sol.weights).unwrap();
        let ols = ols_imputation_mean(&table);
        worst = worst.max((weighting - ols).abs() / ols.abs().max(1.0));
    }
    verdict(worst <= 1e-8, format!("20 instances, max relative gap {worst:.2e} <= 1e-8"))
}

fn convergence_dgp() -> DGPSpec {
    DGPSpec {
        n: 200,
        d: 3,
        covariates: CovariateLaw::Bernoulli { p: 0.5 },
        propensity: LinearIndex::linear(&[("(intercept)", -0.3), ("x1", 1.0), ("x2", -0.8), ("x3", 0.5)]),
        outcome_treated: LinearIndex::linear(&[("(intercept)", 1.0)]),
        outcome_control: LinearIndex::linear(&[]),
        sigma_y: 1.0,
        epsilon: 0.02,
        seed: 7,
    }
}

fn c5_consistency() -> Verdict {
    let run = |basis: BasisSpec| {
        let cfg = ConvergenceConfig {
            dgp: convergence_dgp(),
            sizes: vec![200, 800, 3200],
            replications: 200,
            basis,
            weighting: WeightingConfig {
                dispersion: DispersionSpec::Quadratic,
                penalty: PenaltyKind::L2Scaled,
                sigma2: Some(1.0),
                ..WeightingConfig::default()
            },
            arm: Arm::Treated,
        };
        convergence_experiment(&cfg).unwrap()
    };
    let rich = run(BasisSpec::binary_interactions(3, 1.0));
    let control = run(BasisSpec::binary_interactions(3, 1.0).with_scale("*", 0.0));
    let rmse = |r: &balancing::simlab::SimResult| r.per_size.iter().map(|s| s.rmse_weights).collect::<Vec<_>>();
    let (a, b) = (rmse(&rich), rmse(&control));
    let flat = b[2] >= 0.9 * b[0];
    verdict(
        rich.strictly_decreasing == Some(true) && flat && rich.excluded == 0,
        format!(
            "rich {:.4} > {:.4} > {:.4}; lambda=0 control {:.4}, {:.4}, {:.4} (last/first {:.3} >= 0.9)",
            a[0],
            a[1],
            a[2],
            b[0],
            b[1],
            b[2],
            b[2] / b[0]
        ),
    )
}

fn coverage_dgp() -> DGPSpec {
    DGPSpec {
        n: 500,
        d: 2,
        covariates: CovariateLaw::Uniform,
        propensity: LinearIndex::linear(&[("(intercept)", -0.2), ("x1", 1.2), ("x2", -0.8)]),
        outcome_treated: LinearIndex::linear(&[("(intercept)", 1.0), ("x1", 0.2), ("x2", 0.1)]),
        outcome_control: LinearIndex::linear(&[]),
        sigma_y: 1.0,
        epsilon: 0.02,
        seed: 11,
    }
}

fn coverage_config() -> CoverageConfig {
    let mut est = EstimationConfig::new(EstimandSpec::TreatedMean);
    est.weighting.dispersion = DispersionSpec::Entropy;
    CoverageConfig {
        dgp: coverage_dgp(),
        replications: 1000,
        basis: BasisSpec::linear().with_scale("*", f64::INFINITY),
        estimation: est,
        levels: vec![0.95, 0.5],
    }
}

fn c6_coverage() -> Verdict {
    let r = coverage_experiment(&coverage_config()).unwrap();
    let c95 = r.coverage[0].coverage.unwrap_or(f64::NAN);
    let c50 = r.coverage[1].coverage.unwrap_or(f64::NAN);
    verdict(
        (0.92..=0.975).contains(&c95) && (0.44..=0.56).contains(&c50),
        format!(
            "95% level {c95:.3} in [0.92, 0.975]; 50% level {c50:.3} in [0.44, 0.56]; {} excluded, {} degenerate",
            r.excluded, r.degenerate
        ),
    )
}

fn c7_invariants() -> Verdict {
    let mut exact = 0.0f64;
    let mut negative = 0usize;
    let mut translation = 0.0f64;
    let mut bounded = true;
    let mut aipw_exact = true;
    let mut decomposition = 0.0f64;
    let chis = [DispersionSpec::Quadratic, DispersionSpec::Entropy, DispersionSpec::QuadraticNonneg];
    for k in 0..60u64 {
        let mut rng = rng_for(707, k);
        let n = rng.gen_range(20..60);
        let p = rng.gen_range(2..8);
        let inst = random_duality_instance(&mut rng, n, p).unwrap();
        let chi = chis[(k % 3) as usize];
        let sol = solve_dual(&inst.fm, &inst.treatment, Arm::Treated, &inst.target, chi, &PenaltySpec::l1(), &SolverOptions::default()).unwrap();
        let d = feature_imbalance(&inst.fm, &inst.treatment, &sol.weights, &inst.target).unwrap();
        exact = exact.max(constraint_residual(&d, inst.fm.scales()).unwrap());
        if chi.nonnegative() {
            negative += sol.weights.values().iter().filter(|&&v| v < 0.0).count();
        }

        let y: Vec<f64> = (0..n).map(|_| 3.0 * normal(&mut rng)).collect();
        let names = (1..p).map(|j| format!("x{j}")).collect();
        let cov: Vec<Vec<f64>> = (0..n).map(|i| inst.fm.values().row(i)[1..].to_vec()).collect();
        let table = ObservationTable::new(Matrix::from_rows(&cov), inst.treatment.clone(), Some(y.clone()), names).unwrap();
        let g = hajek_normalize(&sol.weights, &inst.treatment).unwrap();
        let c = rng.gen_range(-50.0..50.0);
        let shifted = table.clone().with_outcome(Some(y.iter().map(|v| v + c).collect())).unwrap();
        let base = ipw_estimate(&table, &g).unwrap();
        translation = translation.max((ipw_estimate(&shifted, &g).unwrap() - base - c).abs() / (1.0 + c.abs()));
        if g.nonnegative() {
            let ys: Vec<f64> = table.arm_indices(Arm::Treated).iter().map(|&i| y[i]).collect();
            let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            bounded &= base >= lo - 1e-12 && base <= hi + 1e-12;
        }
        let zero = OutcomeModel::zero(n, Arm::Treated);
        aipw_exact &= aipw_estimate(&table, &sol.weights, &zero).unwrap() == ipw_estimate(&table, &sol.weights).unwrap();
    }
    let dgp = coverage_dgp().compile().unwrap();
    let cfg = EstimationConfig::new(EstimandSpec::Ate);
    let basis = BasisSpec::linear();
    for r in 0..20u64 {
        let data = dgp.sample(300, r).unwrap();
        let fm = balancing::dataset::build_features(&data.table, &basis).unwrap();
        let oracle = Oracle {
            m1: data.m1.clone(),
            m0: data.m0.clone(),
            mu1: data.mu1,
            mu0: data.mu0,
        };
        let est = estimate_effect(&data.table, &fm, &cfg, None, Some(&oracle)).unwrap();
        let e = est.error_decomposition.unwrap();
        decomposition = decomposition.max((e.imbalance + e.noise + e.sampling - e.total).abs());
    }
    let pass = exact <= 1e-8 && negative == 0 && translation <= 1e-12 && bounded && aipw_exact && decomposition <= 1e-12;
    verdict(
        pass,
        format!(
            "exact-balance residual {exact:.1e}, negative weights {negative}, translation gap {translation:.1e}, \
             sample-bounded {bounded}, aipw(m=0)==ipw {aipw_exact}, decomposition residual {decomposition:.1e}"
        ),
    )
}

fn run_cli(args: &[&str], dir: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_balancing"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
        .status
        .code()
        .unwrap_or(-1)
}

const SIM_CONFIG: &str = r#"{
  "schema": {"treatment": "w", "outcome": "y", "exclude": ["e", "m1", "m0"]},
  "estimand": {"kind": "ate"},
  "weighting": {"dispersion": "entropy"},
  "oracle": {},
  "duality": {"instances": 4},
  "simulation": {"kind": "dataset", "dgp": {
    "n": 400, "d": 2, "covariates": {"kind": "uniform"},
    "propensity": {"basis": {"kind": "linear"}, "coefficients": {"x1": 1.0, "x2": -0.5}},
    "outcome_treated": {"basis": {"kind": "linear"}, "coefficients": {"(intercept)": 1.0, "x1": 0.3}},
    "outcome_control": {"basis": {"kind": "linear"}, "coefficients": {"x2": 0.5}},
    "sigma_y": 1.0}}
}"#;

const COVERAGE_CONFIG: &str = r#"{
  "simulation": {"kind": "coverage", "replications": 100,
    "basis": {"kind": "linear"},
    "estimation": {"estimand": {"kind": "treated-mean"}},
    "dgp": {"n": 200, "d": 2, "covariates": {"kind": "normal"},
      "propensity": {"basis": {"kind": "linear"}, "coefficients": {"x1": 0.5}},
      "outcome_treated": {"basis": {"kind": "linear"}, "coefficients": {"x1": 1.0}},
      "outcome_control": {"basis": {"kind": "linear"}, "coefficients": {}},
      "sigma_y": 1.0}}
}"#;

fn c8_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("run.json"), SIM_CONFIG).unwrap();
    std::fs::write(root.join("coverage.json"), COVERAGE_CONFIG).unwrap();
    if run_cli(&["simulate", "--config", "run.json", "--seed", "5", "--out", "data"], root) != 0 {
        return verdict(false, "dataset generation failed".into());
    }
    let commands: [&[&str]; 6] = [
        &["simulate", "--config", "run.json", "--seed", "5"],
        &["weights", "--config", "run.json", "--data", "data/data.csv"],
        &["balance", "--config", "run.json", "--data", "data/data.csv"],
        &["estimate", "--config", "run.json", "--data", "data/data.csv", "--seed", "9"],
        &["check-duality", "--config", "run.json", "--seed", "3"],
        &["simulate", "--config", "coverage.json", "--seed", "2"],
    ];
    let mut compared = 0;
    for (c, args) in commands.iter().enumerate() {
        let mut outputs = Vec::new();
        for (rep, threads) in ["1", "4"].iter().enumerate() {
            let out = format!("run{c}_{rep}");
            let mut full: Vec<&str> = args.to_vec();
            full.extend(["--out", &out, "--threads", threads, "--format", "json"]);
            let code = run_cli(&full, root);
            if code != 0 {
                return verdict(false, format!("`{}` exited with {code}", args.join(" ")));
            }
            outputs.push(root.join(&out));
        }
        let mut names: Vec<String> = std::fs::read_dir(&outputs[0])
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".json"))
            .collect();
        names.sort();
        for name in &names {
            let a = std::fs::read(outputs[0].join(name)).unwrap();
            let b = std::fs::read(outputs[1].join(name)).unwrap();
            if a != b {
                return verdict(false, format!("`{}`: {name} differs between runs", args.join(" ")));
            }
            compared += 1;
        }
    }
    verdict(compared >= 6, format!("{compared} JSON artifacts byte-identical across re-runs with 1 and 4 threads"))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict, Duration); 8] = [
        ("1 duality verification", c1_duality, Duration::from_secs(120)),
        ("2 kernel-trick equivalence", c2_kernel_trick, Duration::from_secs(30)),
        ("3 brute-force agreement", c3_brute_force, Duration::from_secs(300)),
        ("4 regression-weighting equivalence", c4_regression_equivalence, Duration::from_secs(30)),
        ("5 consistency trend", c5_consistency, Duration::from_secs(600)),
        ("6 interval coverage", c6_coverage, Duration::from_secs(600)),
        ("7 invariants", c7_invariants, Duration::from_secs(60)),
        ("8 determinism", c8_determinism, Duration::from_secs(60)),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let pass = v.pass && elapsed <= budget;
        failed += usize::from(!pass);
        println!(
            "criterion {name}: {} ({}; {:.1}s of {}s)",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
