use balancing::dataset::{Arm, FeatureMatrix, ObservationTable, INTERCEPT_LABEL};
use balancing::dual::{solve_dual, solve_minimax_l2, DispersionSpec, MinimaxOptions, PenaltySpec, SolverOptions};
use balancing::estimators::{hajek_normalize, ipw_estimate, variance_estimate, OutcomeModel};
use balancing::imbalance::{feature_imbalance, imbalance_l2ball, kernel_imbalance, max_imbalance_l1ball, BalanceTarget, WeightVector};
use balancing::kernel::{gram, project_simplex, solve_kernel_minimax, KernelConstraints, KernelSpec, KernelWeightProblem};
use balancing::linalg::Matrix;
use balancing::simlab::{random_duality_instance, rng_for};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Instance {
    rows: Vec<Vec<f64>>,
    treatment: Vec<bool>,
    scales: Vec<f64>,
    weights: Vec<f64>,
    y: Vec<f64>,
}

fn instance() -> impl Strategy<Value = Instance> {
    (5usize..30, 1usize..4).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), n),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(0.1..3.0f64, d + 1),
            prop::collection::vec(-1.0..4.0f64, n),
            prop::collection::vec(-10.0..10.0f64, n),
        )
            .prop_filter_map("both arms need two units", |(rows, mut treatment, scales, weights, y)| {
                treatment[0] = true;
                treatment[1] = true;
                treatment[2] = false;
                treatment[3] = false;
                Some(Instance { rows, treatment, scales, weights, y })
            })
    })
}

impl Instance {
    fn table(&self) -> ObservationTable<f64> {
        let d = self.rows[0].len();
        let names = (1..=d).map(|j| format!("x{j}")).collect();
        ObservationTable::new(Matrix::from_rows(&self.rows), self.treatment.clone(), Some(self.y.clone()), names).unwrap()
    }

    fn features(&self) -> FeatureMatrix<f64> {
        let d = self.rows[0].len();
        let rows: Vec<Vec<f64>> = self.rows.iter().map(|r| std::iter::once(1.0).chain(r.iter().copied()).collect()).collect();
        let labels = std::iter::once(INTERCEPT_LABEL.to_string())
            .chain((1..=d).map(|j| format!("x{j}")))
            .collect();
        FeatureMatrix::new(Matrix::from_rows(&rows), self.scales.clone(), labels, Some(0)).unwrap()
    }

    fn weight_vector(&self, nonneg: bool) -> WeightVector<f64> {
        let v = self
            .weights
            .iter()
            .zip(&self.treatment)
            .map(|(&w, &t)| if !t { 0.0 } else if nonneg { w.abs() + 0.01 } else { w })
            .collect();
        WeightVector::new(v, &self.treatment, Arm::Treated).unwrap()
    }

    fn scaled_gram(&self, fm: &FeatureMatrix<f64>) -> Matrix<f64> {
        let rows: Vec<Vec<f64>> = (0..fm.n())
            .map(|i| fm.values().row(i).iter().zip(fm.scales()).map(|(v, l)| v * l).collect())
            .collect();
        gram(&KernelSpec::Linear, &Matrix::from_rows(&rows)).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_kernel_matches_l2_ball(inst in instance()) {
        let fm = inst.features();
        let g = inst.weight_vector(false);
        let target = BalanceTarget::full_sample(&fm);
        let d = feature_imbalance(&fm, &inst.treatment, &g, &target).unwrap();
        let basis = imbalance_l2ball(&d, fm.scales()).unwrap();
        let kernel = kernel_imbalance(&inst.scaled_gram(&fm), &inst.treatment, &g).unwrap();
        prop_assert!((basis - kernel).abs() <= 1e-10 * basis.max(1.0));
    }

    #[test]
    fn imbalance_measures_are_nonnegative(inst in instance()) {
        let fm = inst.features();
        let g = inst.weight_vector(false);
        let d = feature_imbalance(&fm, &inst.treatment, &g, &BalanceTarget::full_sample(&fm)).unwrap();
        prop_assert!(max_imbalance_l1ball(&d, fm.scales()).unwrap() >= 0.0);
        prop_assert!(imbalance_l2ball(&d, fm.scales()).unwrap() >= 0.0);
    }

    #[test]
    fn hajek_weights_are_translation_equivariant(inst in instance(), c in -100.0..100.0f64) {
        let table = inst.table();
        let g = hajek_normalize(&inst.weight_vector(true), &inst.treatment).unwrap();
        let shifted = table.clone().with_outcome(Some(inst.y.iter().map(|v| v + c).collect())).unwrap();
        let a = ipw_estimate(&table, &g).unwrap();
        let b = ipw_estimate(&shifted, &g).unwrap();
        prop_assert!((b - a - c).abs() <= 1e-12 * (1.0 + c.abs() + a.abs()));
        let treated: Vec<f64> = table.arm_indices(Arm::Treated).iter().map(|&i| inst.y[i]).collect();
        let lo = treated.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = treated.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
    }

    #[test]
    fn variance_is_permutation_invariant(inst in instance(), shift in 1usize..29) {
        let table = inst.table();
        let g = inst.weight_vector(false);
        let preds: Vec<f64> = inst.y.iter().map(|v| 0.3 * v - 1.0).collect();
        let v = variance_estimate(&table, &g, &OutcomeModel::from_predictions(preds.clone(), Arm::Treated)).unwrap();
        let n = inst.rows.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let permuted = Instance {
            rows: perm.iter().map(|&i| inst.rows[i].clone()).collect(),
            treatment: perm.iter().map(|&i| inst.treatment[i]).collect(),
            scales: inst.scales.clone(),
            weights: perm.iter().map(|&i| inst.weights[i]).collect(),
            y: perm.iter().map(|&i| inst.y[i]).collect(),
        };
        let pp: Vec<f64> = perm.iter().map(|&i| preds[i]).collect();
        let w = variance_estimate(&permuted.table(), &permuted.weight_vector(false), &OutcomeModel::from_predictions(pp, Arm::Treated)).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert!((v - w).abs() <= 1e-12 * v.max(1e-300));
    }

    #[test]
    fn linear_kernel_solve_matches_closed_form(inst in instance(), sigma2 in 0.05..5.0f64) {
        let fm = inst.features();
        let target = BalanceTarget::full_sample(&fm);
        let basis = solve_minimax_l2(&fm, &inst.treatment, &target, sigma2, &MinimaxOptions::default()).unwrap();
        let prob = KernelWeightProblem::new(inst.scaled_gram(&fm), inst.treatment.clone(), sigma2, KernelConstraints::None);
        let kernel = solve_kernel_minimax(&prob).unwrap();
        for (a, b) in basis.weights.values().iter().zip(kernel.weights.values()) {
            prop_assert!((a - b).abs() <= 1e-7 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn simplex_projection_is_feasible(v in prop::collection::vec(-5.0..5.0f64, 1..20), total in 0.1..10.0f64) {
        let x = project_simplex(&v, total);
        prop_assert!(x.iter().all(|&u| u >= 0.0));
        prop_assert!((x.iter().sum::<f64>() - total).abs() <= 1e-12 * total.max(1.0) * v.len() as f64);
    }

    #[test]
    fn dual_weights_respect_sign_and_exact_balance(seed in 0u64..10_000, entropy in any::<bool>()) {
        let mut rng = rng_for(seed, 0);
        let inst = random_duality_instance(&mut rng, 30, 4).unwrap();
        let chi = if entropy { DispersionSpec::Entropy } else { DispersionSpec::QuadraticNonneg };
        let sol = solve_dual(&inst.fm, &inst.treatment, Arm::Treated, &inst.target, chi, &PenaltySpec::l1(), &SolverOptions::default());
        if let Ok(sol) = sol {
            prop_assert!(sol.weights.values().iter().all(|&v| v >= 0.0));
            if sol.converged {
                let d = feature_imbalance(&inst.fm, &inst.treatment, &sol.weights, &inst.target).unwrap();
                prop_assert!(d[0].abs() <= 1e-8);
            }
        }
    }
}
