//! Minimax weights for kernel (RKHS) models, solved in weight space.
//!
//! With Gram matrix `K` and target weights `ω` (all ones for the full
//! sample), the objective over the weighted arm `A` is
//! `(1/n²) [(ω − Aγ)ᵀ K (ω − Aγ) + σ² Σ_A γ_i²]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Arm;
use crate::error::{Error, Result};
use crate::imbalance::{effective_sample_size, kernel_imbalance_against, WeightVector};
use crate::linalg::{largest_eigenvalue, symmetric_eigen, Cholesky, Matrix};
use crate::scalar::{compensated_sum, dot, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelSpec {
    Linear,
    /// `(x·x' + offset)^degree`.
    Polynomial { degree: u32, offset: f64 },
    /// `exp(−‖x − x'‖² / (2 b²))`; a missing bandwidth is set by the median
    /// pairwise distance.
    Gaussian {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bandwidth: Option<f64>,
    },
    /// `Π_ℓ (1 + c x_ℓ x'_ℓ)`.
    BinaryProduct { decay: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Polynomial { degree, offset } if degree < 1 || !offset.is_finite() => Err(Error::Invalid(
                format!("polynomial kernel needs degree >= 1 and finite offset, got {degree}, {offset}"),
            )),
            Self::Gaussian { bandwidth: Some(b) } if !(b > 0.0 && b.is_finite()) => {
                Err(Error::Invalid(format!("gaussian bandwidth must be positive, got {b}")))
            }
            Self::BinaryProduct { decay } if !(decay > 0.0 && decay <= 1.0) => {
                Err(Error::Invalid(format!("binary-product decay must lie in (0, 1], got {decay}")))
            }
            _ => Ok(()),
        }
    }

    /// Fills in the median-distance bandwidth when it is missing.
    pub fn resolved<T: Scalar>(&self, x: &Matrix<T>) -> Result<Self> {
        self.validate()?;
        Ok(match *self {
            Self::Gaussian { bandwidth: None } => Self::Gaussian {
                bandwidth: Some(median_bandwidth(x)?),
            },
            other => other,
        })
    }

    /// `K(x, x')`. Panics on an unresolved gaussian bandwidth.
    pub fn eval<T: Scalar>(&self, a: &[T], b: &[T]) -> T {
        match *self {
            Self::Linear => dot(a, b),
            Self::Polynomial { degree, offset } => (dot(a, b) + T::lit(offset)).powi(degree as i32),
            Self::Gaussian { bandwidth } => {
                let bw = T::lit(bandwidth.expect("gaussian bandwidth resolved before evaluation"));
                let d2: T = a.iter().zip(b).map(|(&u, &v)| (u - v) * (u - v)).sum();
                (-d2 / (T::two() * bw * bw)).exp()
            }
            Self::BinaryProduct { decay } => {
                let c = T::lit(decay);
                a.iter().zip(b).fold(T::one(), |acc, (&u, &v)| acc * (T::one() + c * u * v))
            }
        }
    }
}

/// Median Euclidean distance over pairs of rows, on at most 1,000 evenly
/// strided rows.
pub fn median_bandwidth<T: Scalar>(x: &Matrix<T>) -> Result<f64> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::Invalid("the bandwidth heuristic needs at least two rows".into()));
    }
    let stride = n.div_ceil(1000);
    let rows: Vec<&[T]> = (0..n).step_by(stride).map(|i| x.row(i)).collect();
    let mut d: Vec<f64> = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in 0..i {
            let s: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(&u, &v)| (u - v).to_f64_lossy().powi(2))
                .sum();
            d.push(s.sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    if med > 0.0 {
        Ok(med)
    } else {
        Err(Error::Invalid("median pairwise distance is zero; set the bandwidth explicitly".into()))
    }
}

/// Gram matrix `K_ij = K(X_i, X_j)`.
pub fn gram<T: Scalar>(spec: &KernelSpec, x: &Matrix<T>) -> Result<Matrix<T>> {
    let spec = spec.resolved(x)?;
    let n = x.rows();
    let mut k = Matrix::zeros(n, n);
    let data: Vec<T> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| spec.eval(x.row(i.min(j)), x.row(i.max(j))))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!(
            "kernel entry ({}, {}) is not finite",
            pos / n,
            pos % n
        )));
    }
    for (i, row) in data.chunks(n.max(1)).enumerate().take(n) {
        k.row_mut(i).copy_from_slice(row);
    }
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KernelConstraints {
    #[default]
    None,
    /// `γ ≥ 0` and `Σ_A γ_i = Σ ω_i` (`(1/n) Σ γ_i = 1` for the full sample).
    Simplex,
}

#[derive(Debug, Clone)]
pub struct KernelWeightProblem<T> {
    pub gram: Matrix<T>,
    pub treatment: Vec<bool>,
    pub sigma2: f64,
    pub constraints: KernelConstraints,
    pub arm: Arm,
    /// Target weights `ω`; all ones balances toward the full sample.
    pub omega: Vec<T>,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl<T: Scalar> KernelWeightProblem<T> {
    pub fn new(gram: Matrix<T>, treatment: Vec<bool>, sigma2: f64, constraints: KernelConstraints) -> Self {
        let n = treatment.len();
        Self {
            gram,
            treatment,
            sigma2,
            constraints,
            arm: Arm::Treated,
            omega: vec![T::one(); n],
            tolerance: 1e-10,
            max_iter: 100_000,
        }
    }

    pub fn with_arm(mut self, arm: Arm) -> Self {
        self.arm = arm;
        self
    }

    pub fn with_target(mut self, omega: Vec<T>) -> Self {
        self.omega = omega;
        self
    }

    fn check(&self) -> Result<Vec<usize>> {
        let n = self.treatment.len();
        if self.gram.rows() != n || self.gram.cols() != n || self.omega.len() != n {
            return Err(Error::Dimension("gram, treatment and target must share n".into()));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::Invalid(format!("sigma2 = {} must be finite and >= 0", self.sigma2)));
        }
        let scale = self.gram.as_slice().iter().fold(T::one(), |m, v| m.max(v.abs()));
        let asym = self.gram.max_asymmetry();
        if asym > T::lit(crate::imbalance::KERNEL_TOL) * scale {
            return Err(Error::AsymmetricKernel(asym.to_f64_lossy()));
        }
        let idx: Vec<usize> = (0..n).filter(|&i| self.arm.contains(self.treatment[i])).collect();
        if idx.is_empty() {
            return Err(Error::EmptyGroup);
        }
        Ok(idx)
    }

    /// Objective at full-length weights.
    pub fn objective(&self, g: &WeightVector<T>) -> Result<T> {
        let imb = kernel_imbalance_against(&self.gram, &self.treatment, g, &self.omega)?;
        let n = T::from_usize_lossy(self.treatment.len());
        let ss: T = g.values().iter().map(|&v| v * v).sum();
        Ok(imb * imb + T::lit(self.sigma2) * ss / (n * n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelSolution<T> {
    pub weights: WeightVector<T>,
    /// Objective per accepted iterate; a single entry for the linear solve.
    pub objective_trace: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    /// Diagonal jitter added to repair a numerically indefinite Gram block.
    pub jitter: f64,
}

struct Reduced<T> {
    kaa: Matrix<T>,
    rhs: Vec<T>,
    c0: T,
    nn: T,
    s2: T,
}

impl<T: Scalar> Reduced<T> {
    fn new(prob: &KernelWeightProblem<T>, idx: &[usize]) -> Self {
        let m = idx.len();
        let mut kaa = Matrix::zeros(m, m);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                kaa[(a, b)] = prob.gram[(i, j)];
            }
        }
        let kw = prob.gram.matvec(&prob.omega);
        let n = T::from_usize_lossy(prob.treatment.len());
        Self {
            kaa,
            rhs: idx.iter().map(|&i| kw[i]).collect(),
            c0: dot(&prob.omega, &kw),
            nn: n * n,
            s2: T::lit(prob.sigma2),
        }
    }

    fn value(&self, x: &[T]) -> T {
        let kx = self.kaa.matvec(x);
        let q = compensated_sum(x.iter().zip(&kx).map(|(&a, &b)| a * b + self.s2 * a * a));
        (self.c0 - T::two() * dot(x, &self.rhs) + q) / self.nn
    }

    /// `value(c) − value(x)` as `δᵀ[(K + σ²)(c + x) − 2r] / n²` with
    /// `δ = c − x`, which stays accurate when the two values agree to rounding.
    fn delta(&self, x: &[T], c: &[T]) -> T {
        let s: Vec<T> = x.iter().zip(c).map(|(&a, &b)| a + b).collect();
        let ks = self.kaa.matvec(&s);
        compensated_sum(
            (0..x.len()).map(|a| (c[a] - x[a]) * (ks[a] + self.s2 * s[a] - T::two() * self.rhs[a])),
        ) / self.nn
    }

    fn gradient(&self, x: &[T]) -> Vec<T> {
        let kx = self.kaa.matvec(x);
        (0..x.len())
            .map(|a| T::two() * (kx[a] + self.s2 * x[a] - self.rhs[a]) / self.nn)
            .collect()
    }
}

/// Solves the kernel minimax problem.
pub fn solve_kernel_minimax<T: Scalar>(prob: &KernelWeightProblem<T>) -> Result<KernelSolution<T>> {
    let idx = prob.check()?;
    let red = Reduced::new(prob, &idx);
    let (group, trace, iterations, converged, jitter) = match prob.constraints {
        KernelConstraints::None => {
            let (x, jitter) = linear_solve(&red)?;
            let v = red.value(&x);
            (x, vec![v], 1, true, jitter)
        }
        KernelConstraints::Simplex => {
            let total = compensated_sum(prob.omega.iter().copied());
            if !(total > T::zero()) {
                return Err(Error::Infeasible("simplex weights need a positive target total".into()));
            }
            let (x, trace, it, ok) = projected_gradient(&red, total, prob.tolerance, prob.max_iter);
            (x, trace, it, ok, 0.0)
        }
    };
    let weights = WeightVector::from_group(&group, &prob.treatment, prob.arm)?;
    Ok(KernelSolution {
        weights,
        objective_trace: trace,
        iterations,
        converged,
        jitter,
    })
}

fn linear_solve<T: Scalar>(red: &Reduced<T>) -> Result<(Vec<T>, f64)> {
    let m = red.rhs.len();
    if red.s2 == T::zero() {
        return min_norm_solve(&red.kaa, &red.rhs).map(|x| (x, 0.0));
    }
    let mut a = red.kaa.clone();
    for i in 0..m {
        a[(i, i)] += red.s2;
    }
    if let Ok(ch) = Cholesky::new(&a, T::zero()) {
        return Ok((ch.solve(&red.rhs), 0.0));
    }
    let jitter = T::lit(1e-10) * red.kaa.trace().abs() / T::from_usize_lossy(m);
    for i in 0..m {
        a[(i, i)] += jitter;
    }
    let ch = Cholesky::new(&a, T::zero()).map_err(|_| Error::NotPsd(-jitter.to_f64_lossy()))?;
    Ok((ch.solve(&red.rhs), jitter.to_f64_lossy()))
}

/// Minimum-norm solution of a consistent PSD system `K x = r`; an
/// inconsistent one is reported as singular.
fn min_norm_solve<T: Scalar>(k: &Matrix<T>, r: &[T]) -> Result<Vec<T>> {
    let m = r.len();
    let (vals, vecs) = symmetric_eigen(k);
    let top = vals.iter().fold(T::zero(), |a, &v| a.max(v.abs()));
    let cut = top * T::epsilon() * T::lit(1e3) * T::from_usize_lossy(m.max(1));
    let mut x = vec![T::zero(); m];
    for (c, &lam) in vals.iter().enumerate() {
        if lam <= cut {
            continue;
        }
        let coef = (0..m).map(|a| vecs[(a, c)] * r[a]).sum::<T>() / lam;
        for a in 0..m {
            x[a] += coef * vecs[(a, c)];
        }
    }
    let kx = k.matvec(&x);
    let resid = kx.iter().zip(r).fold(T::zero(), |acc, (&u, &v)| acc.max((u - v).abs()));
    let rscale = r.iter().fold(T::one(), |acc, v| acc.max(v.abs()));
    if resid > T::lit(1e-8) * rscale {
        return Err(Error::Singular {
            columns: Vec::new(),
            hint: format!(
                "; the weighted Gram block is singular and the target is out of its range \
                 (residual {:e}); set sigma2 > 0 or add diagonal jitter",
                resid.to_f64_lossy()
            ),
        });
    }
    Ok(x)
}

/// Euclidean projection onto `{x ≥ 0, Σ x = total}`.
pub fn project_simplex<T: Scalar>(v: &[T], total: T) -> Vec<T> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).expect("finite values"));
    let mut cum = T::zero();
    let mut tau = T::zero();
    for (k, &uk) in u.iter().enumerate() {
        cum += uk;
        let t = (cum - total) / T::from_usize_lossy(k + 1);
        if uk - t > T::zero() {
            tau = t;
        }
    }
    v.iter().map(|&x| (x - tau).max(T::zero())).collect()
}

fn projected_gradient<T: Scalar>(red: &Reduced<T>, total: T, tol: f64, max_iter: usize) -> (Vec<T>, Vec<T>, usize, bool) {
    let m = red.rhs.len();
    let lip = T::two() * (largest_eigenvalue(&red.kaa, 500) * T::lit(1.01) + red.s2) / red.nn;
    let step = T::one() / lip.max(T::min_positive_value());
    let scale = total / T::from_usize_lossy(m);
    let tol = T::lit(tol).max(T::epsilon() * T::lit(1e3)) * scale;
    let mapping = |x: &[T]| -> T {
        let g = red.gradient(x);
        let z: Vec<T> = x.iter().zip(&g).map(|(&a, &b)| a - step * b).collect();
        project_simplex(&z, total)
            .iter()
            .zip(x)
            .fold(T::zero(), |acc, (&p, &a)| acc.max((p - a).abs()))
    };

    let mut x = vec![scale; m];
    let mut fx = red.value(&x);
    let mut trace = vec![fx];
    let mut y = x.clone();
    let mut t = T::one();
    let mut rejected = false;
    for it in 1..=max_iter {
        let g = red.gradient(&y);
        let z: Vec<T> = y.iter().zip(&g).map(|(&a, &b)| a - step * b).collect();
        let cand = project_simplex(&z, total);
        let df = red.delta(&x, &cand);
        if df <= T::zero() {
            let t_next = (T::one() + (T::one() + T::lit(4.0) * t * t).sqrt()) * T::half();
            let beta = (t - T::one()) / t_next;
            y = cand.iter().zip(&x).map(|(&c, &p)| c + beta * (c - p)).collect();
            x = cand;
            fx += df;
            t = t_next;
            rejected = false;
            trace.push(fx);
        } else if rejected {
            // A plain step from the incumbent failed too. Rounding in the
            // projected sum times the multiplier of the sum constraint now
            // dominates the decrease, so accept a mapping at that floor.
            let floor = tol.max(T::epsilon().sqrt() * T::lit(10.0) * scale);
            return (x.clone(), trace, it, mapping(&x) <= floor);
        } else {
            y = x.clone();
            t = T::one();
            rejected = true;
        }
        if mapping(&x) <= tol {
            return (x, trace, it, true);
        }
    }
    let done = mapping(&x) <= tol;
    (x, trace, max_iter, done)
}

/// Residual variance of a pilot least-squares fit of the outcome on an
/// intercept and the covariates, within the arm.
pub fn pilot_sigma2<T: Scalar>(x: &Matrix<T>, treatment: &[bool], y: &[T], arm: Arm) -> Result<f64> {
    let idx: Vec<usize> = (0..treatment.len()).filter(|&i| arm.contains(treatment[i])).collect();
    let p = x.cols() + 1;
    if idx.len() <= p {
        return Err(Error::Invalid(format!(
            "pilot fit needs more than {p} units in the {} arm",
            arm.name()
        )));
    }
    let rows: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| {
            std::iter::once(1.0)
                .chain(x.row(i).iter().map(|v| v.to_f64_lossy()))
                .collect()
        })
        .collect();
    let design = Matrix::from_rows(&rows);
    let yv: Vec<f64> = idx.iter().map(|&i| y[i].to_f64_lossy()).collect();
    let mut xtx = design.weighted_gram(&vec![1.0; idx.len()]);
    let ridge = 1e-10 * xtx.trace() / p as f64;
    for j in 0..p {
        xtx[(j, j)] += ridge;
    }
    let beta = Cholesky::new(&xtx, 0.0)
        .map_err(|_| Error::Invalid("pilot design is degenerate".into()))?
        .solve(&design.tmatvec(&yv));
    let fitted = design.matvec(&beta);
    let rss: f64 = yv.iter().zip(&fitted).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(rss / (idx.len() - p) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub sigma2: f64,
    pub imbalance: f64,
    /// `sqrt((1/n) Σ γ_i²)`.
    pub gamma_rms: f64,
    pub effective_sample_size: f64,
}

/// Solves the problem at each `σ²` in `grid`, reporting the trade-off between
/// imbalance and weight size.
pub fn sigma2_sweep<T: Scalar>(prob: &KernelWeightProblem<T>, grid: &[f64]) -> Result<Vec<SweepPoint>> {
    grid.iter()
        .map(|&s2| {
            let mut p = prob.clone();
            p.sigma2 = s2;
            let sol = solve_kernel_minimax(&p)?;
            let g = &sol.weights;
            let imb = kernel_imbalance_against(&p.gram, &p.treatment, g, &p.omega)?;
            let n = g.len() as f64;
            let ss: f64 = g.values().iter().map(|v| v.to_f64_lossy().powi(2)).sum();
            Ok(SweepPoint {
                sigma2: s2,
                imbalance: imb.to_f64_lossy(),
                gamma_rms: (ss / n).sqrt(),
                effective_sample_size: effective_sample_size(g).map_or(0.0, |v| v.to_f64_lossy()),
            })
        })
        .collect()
}
