//! ε-insensitive support vector regression without intercept.
//!
//! Primal: minimize `Σ ξ_i + (λ/2) αᵀKα` with `ξ_i ≥ |y_i − (Kα)_i| − ε`, `ξ ≥ 0`.
//! We solve the dual in `β ∈ [−1, 1]ⁿ`,
//! `min ½ βᵀKβ / λ − βᵀy + ε‖β‖₁`, and recover `α = β / λ`.
//! Coordinate descent finds the active set; a Newton solve on the free
//! coordinates then pins the solution down to the KKT tolerance. When the
//! Hessian is badly conditioned, a primal active-set loop takes over.

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gram_matrix, KernelSpec};

pub const KKT_TOLERANCE: f64 = 1e-6;
pub const MAX_SWEEPS: usize = 100_000;
const POLISH_EVERY: usize = 20;
const PSD_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvrOptions {
    pub lambda: f64,
    pub epsilon_tube: f64,
    pub max_sweeps: usize,
    pub kkt_tolerance: f64,
}

impl SvrOptions {
    pub fn new(lambda: f64, epsilon_tube: f64) -> Self {
        Self {
            lambda,
            epsilon_tube,
            max_sweeps: MAX_SWEEPS,
            kkt_tolerance: KKT_TOLERANCE,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.epsilon_tube >= 0.0 && self.epsilon_tube.is_finite()) {
            return Err(Error::Config(format!("epsilon tube must be nonnegative, got {}", self.epsilon_tube)));
        }
        Ok(())
    }
}

/// Solution of the dual problem for a fixed Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SvrSolution {
    /// Expansion coefficients `α = β / λ`.
    pub alphas: Vec<f64>,
    pub sweeps: usize,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvrModel {
    pub alphas: Vec<f64>,
    pub training_inputs: Vec<Vec<f64>>,
    pub kernel: KernelSpec,
    pub lambda: f64,
    pub epsilon_tube: f64,
}

impl SvrModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        svr_predict(self, x)
    }
}

/// Largest per-coordinate KKT violation of the dual at `beta`, given `f = Kβ/λ`.
pub fn kkt_residual(beta: &[f64], f: &[f64], y: &[f64], eps: f64) -> f64 {
    beta.iter()
        .zip(f)
        .zip(y)
        .map(|((&b, &fi), &yi)| {
            let r = yi - fi;
            if b == 0.0 {
                (r.abs() - eps).max(0.0)
            } else if b >= 1.0 {
                (eps - r).max(0.0)
            } else if b <= -1.0 {
                (r + eps).max(0.0)
            } else if b > 0.0 {
                (r - eps).abs()
            } else {
                (r + eps).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Primal objective `Σ max(0, |y − Kα| − ε) + (λ/2) αᵀKα`.
pub fn primal_objective(gram: &Mat<f64>, y: &[f64], alphas: &[f64], lambda: f64, eps: f64) -> f64 {
    let f = matvec(gram, alphas);
    let loss: f64 = f.iter().zip(y).map(|(fi, yi)| ((yi - fi).abs() - eps).max(0.0)).sum();
    let quad: f64 = alphas.iter().zip(&f).map(|(a, fi)| a * fi).sum();
    loss + 0.5 * lambda * quad
}

fn matvec(m: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum())
        .collect()
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Trains on a precomputed Gram matrix, starting from `β = 0`.
pub fn svr_solve(gram: &Mat<f64>, y: &[f64], opts: &SvrOptions) -> Result<SvrSolution> {
    svr_solve_from(gram, y, opts, &vec![0.0; y.len()])
}

/// Trains on a precomputed Gram matrix from a feasible dual start `β₀ ∈ [−1, 1]ⁿ`.
pub fn svr_solve_from(gram: &Mat<f64>, y: &[f64], opts: &SvrOptions, beta0: &[f64]) -> Result<SvrSolution> {
    opts.validate()?;
    let n = y.len();
    if n == 0 {
        return Err(Error::Training("SVR needs at least one sample".into()));
    }
    if gram.nrows() != n || gram.ncols() != n {
        return Err(Error::shape(n, gram.nrows()));
    }
    if beta0.len() != n {
        return Err(Error::shape(n, beta0.len()));
    }
    if beta0.iter().any(|b| !(b.abs() <= 1.0)) {
        return Err(Error::Domain("dual start must lie in [-1, 1]".into()));
    }
    let lambda = opts.lambda;
    let eps = opts.epsilon_tube;
    let mut k = gram.clone();
    for i in 0..n {
        k[(i, i)] += PSD_JITTER;
    }

    let mut beta = beta0.to_vec();
    // f = Kβ / λ, kept in sync with every coordinate update.
    let mut f: Vec<f64> = matvec(&k, &beta).into_iter().map(|v| v / lambda).collect();

    let mut residual = kkt_residual(&beta, &f, y, eps);
    let mut sweeps = 0;
    while residual > opts.kkt_tolerance && sweeps < opts.max_sweeps {
        for i in 0..n {
            let kii = k[(i, i)] / lambda;
            let g = f[i] - kii * beta[i] - y[i];
            let new = (soft_threshold(-g, eps) / kii).clamp(-1.0, 1.0);
            let delta = new - beta[i];
            if delta != 0.0 {
                beta[i] = new;
                for (j, fj) in f.iter_mut().enumerate() {
                    *fj += k[(j, i)] * delta / lambda;
                }
            }
        }
        sweeps += 1;
        if sweeps % POLISH_EVERY == 0 {
            active_set_step(&k, y, &mut beta, &mut f, lambda, eps);
        }
        residual = kkt_residual(&beta, &f, y, eps);
        if residual > opts.kkt_tolerance && sweeps % (10 * POLISH_EVERY) == 0 {
            let (mut b, mut fp) = (beta.clone(), f.clone());
            active_set_solve(&k, y, &mut b, &mut fp, lambda, eps, opts.kkt_tolerance);
            if kkt_residual(&b, &fp, y, eps) <= opts.kkt_tolerance {
                beta = b;
                f = fp;
                residual = kkt_residual(&beta, &f, y, eps);
            }
        }
    }
    // Tighten a solution that is already within tolerance: with the right
    // active set one Newton step lands on the exact optimum.
    if residual <= opts.kkt_tolerance {
        let (mut b, mut fp) = (beta.clone(), f.clone());
        if active_set_step(&k, y, &mut b, &mut fp, lambda, eps) {
            let r = kkt_residual(&b, &fp, y, eps);
            if r < residual {
                beta = b;
                residual = r;
            }
        }
    }
    if residual > opts.kkt_tolerance {
        return Err(Error::Training(format!(
            "SVR did not reach KKT tolerance {} within {} sweeps (residual {residual:e})",
            opts.kkt_tolerance, opts.max_sweeps
        )));
    }
    Ok(SvrSolution {
        alphas: beta.iter().map(|b| b / lambda).collect(),
        sweeps,
        kkt_residual: residual,
    })
}

/// Newton step on the free coordinates (nonzero and strictly inside the
/// box) with the rest fixed, truncated at the first coordinate that would
/// change sign or leave the box. Decreases the dual objective; returns
/// whether a step was taken.
fn active_set_step(k: &Mat<f64>, y: &[f64], beta: &mut [f64], f: &mut [f64], lambda: f64, eps: f64) -> bool {
    let sign: Vec<f64> = beta.iter().map(|&b| if b != 0.0 && b.abs() < 1.0 { b.signum() } else { 0.0 }).collect();
    let stepped = newton_on_free(k, y, beta, &sign, lambda, eps).is_some();
    if stepped {
        refresh(k, beta, f, lambda);
    }
    stepped
}

/// Solves for the free coordinates (`sign ≠ 0`) with the rest held, then moves
/// toward that point until the first sign change or box exit. Returns the
/// blocking coordinate, if any, or `None` when the solve fails.
fn newton_on_free(k: &Mat<f64>, y: &[f64], beta: &mut [f64], sign: &[f64], lambda: f64, eps: f64) -> Option<Option<usize>> {
    let n = beta.len();
    let free: Vec<usize> = (0..n).filter(|&i| sign[i] != 0.0).collect();
    if free.is_empty() {
        return None;
    }
    let m = free.len();
    let a = Mat::from_fn(m, m, |r, c| k[(free[r], free[c])] / lambda);
    let rhs = Mat::from_fn(m, 1, |r, _| {
        let i = free[r];
        let fixed: f64 = (0..n).filter(|&j| sign[j] == 0.0).map(|j| k[(i, j)] * beta[j] / lambda).sum();
        y[i] - eps * sign[i] - fixed
    });
    let sol = PartialPivLu::new(a.as_ref()).solve(&rhs);
    if (0..m).any(|r| !sol[(r, 0)].is_finite()) {
        return None;
    }
    let mut t = 1.0f64;
    let mut blocking = None;
    for (r, &i) in free.iter().enumerate() {
        let d = sol[(r, 0)] - beta[i];
        if d == 0.0 {
            continue;
        }
        // Zero crossing or box exit, whichever the direction meets first.
        let stop = if (sign[i] > 0.0) == (d < 0.0) { 0.0 } else { d.signum() };
        let ti = (stop - beta[i]) / d;
        if ti < t {
            t = ti.max(0.0);
            blocking = Some((i, stop));
        }
    }
    for (r, &i) in free.iter().enumerate() {
        beta[i] += t * (sol[(r, 0)] - beta[i]);
    }
    if let Some((i, stop)) = blocking {
        beta[i] = stop;
    }
    Some(blocking.map(|(i, _)| i))
}

fn refresh(k: &Mat<f64>, beta: &[f64], f: &mut [f64], lambda: f64) {
    let n = beta.len();
    for (i, fi) in f.iter_mut().enumerate() {
        *fi = (0..n).map(|j| k[(i, j)] * beta[j]).sum::<f64>() / lambda;
    }
}

/// Primal active-set iterations seeded from the current point: blocked steps
/// fix the blocking coordinate, full steps release the worst fixed violator.
/// Leaves `beta` and `f` at the last iterate.
fn active_set_solve(k: &Mat<f64>, y: &[f64], beta: &mut [f64], f: &mut [f64], lambda: f64, eps: f64, tol: f64) {
    let n = beta.len();
    let mut sign: Vec<f64> = beta.iter().map(|&b| if b != 0.0 && b.abs() < 1.0 { b.signum() } else { 0.0 }).collect();
    for _ in 0..(10 * n + 50) {
        if sign.iter().any(|&s| s != 0.0) {
            match newton_on_free(k, y, beta, &sign, lambda, eps) {
                None => return,
                Some(Some(i)) => {
                    sign[i] = 0.0;
                    refresh(k, beta, f, lambda);
                    continue;
                }
                Some(None) => refresh(k, beta, f, lambda),
            }
        }
        // Worst violation among held coordinates, and the direction that reduces it.
        let mut worst: Option<(usize, f64, f64)> = None;
        for i in (0..n).filter(|&i| sign[i] == 0.0) {
            let r = y[i] - f[i];
            let (viol, dir) = if beta[i] == 0.0 {
                ((r.abs() - eps).max(0.0), r.signum())
            } else if beta[i] >= 1.0 {
                ((eps - r).max(0.0), 1.0)
            } else {
                ((r + eps).max(0.0), -1.0)
            };
            if viol > tol && worst.is_none_or(|w| viol > w.1) {
                worst = Some((i, viol, dir));
            }
        }
        match worst {
            Some((i, _, dir)) => sign[i] = dir,
            None => return,
        }
    }
}

pub fn svr_train(inputs: &[Vec<f64>], targets: &[f64], kernel: KernelSpec, lambda: f64, epsilon_tube: f64) -> Result<SvrModel> {
    if inputs.len() != targets.len() {
        return Err(Error::shape(inputs.len(), targets.len()));
    }
    let gram = gram_matrix(inputs, &kernel)?;
    let sol = svr_solve(&gram, targets, &SvrOptions::new(lambda, epsilon_tube))?;
    Ok(SvrModel {
        alphas: sol.alphas,
        training_inputs: inputs.to_vec(),
        kernel,
        lambda,
        epsilon_tube,
    })
}

pub fn svr_predict(model: &SvrModel, x: &[f64]) -> Result<f64> {
    if let Some(first) = model.training_inputs.first() {
        if first.len() != x.len() {
            return Err(Error::shape(first.len(), x.len()));
        }
    }
    let mut acc = 0.0;
    for (a, xi) in model.alphas.iter().zip(&model.training_inputs) {
        if *a != 0.0 {
            acc += a * model.kernel.eval(xi, x)?;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelKind;
    use clarabel::algebra::CscMatrix;
    use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian_spec(gamma: f64) -> KernelSpec {
        KernelSpec::new(KernelKind::GaussianOutput, gamma).unwrap()
    }

    /// Interior-point solve of the primal QP in `(α, ξ)`.
    fn reference_objective(k: &Mat<f64>, y: &[f64], lambda: f64, eps: f64) -> f64 {
        let n = y.len();
        // P = blockdiag(λK, 0), upper triangle only.
        let mut pt = vec![vec![0.0; 2 * n]; 2 * n];
        for i in 0..n {
            for j in i..n {
                pt[i][j] = lambda * k[(i, j)];
            }
        }
        let p = CscMatrix::from(&pt);
        let mut q = vec![0.0; n];
        q.extend(std::iter::repeat_n(1.0, n));
        // Constraints as A z + s = b, s ≥ 0.
        let mut a = vec![vec![0.0; 2 * n]; 3 * n];
        let mut b = vec![0.0; 3 * n];
        for i in 0..n {
            // −ξ ≤ 0
            a[i][n + i] = -1.0;
            // y − Kα − ε ≤ ξ  ⇒  −Kα − ξ ≤ ε − y
            for j in 0..n {
                a[n + i][j] = -k[(i, j)];
                a[2 * n + i][j] = k[(i, j)];
            }
            a[n + i][n + i] = -1.0;
            b[n + i] = eps - y[i];
            // Kα − y − ε ≤ ξ  ⇒  Kα − ξ ≤ ε + y
            a[2 * n + i][n + i] = -1.0;
            b[2 * n + i] = eps + y[i];
        }
        let a = CscMatrix::from(&a);
        let cones = [NonnegativeConeT(3 * n)];
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_gap_abs(1e-12)
            .tol_gap_rel(1e-12)
            .tol_feas(1e-12)
            .build()
            .unwrap();
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings).unwrap();
        solver.solve();
        assert!(matches!(solver.solution.status, SolverStatus::Solved | SolverStatus::AlmostSolved));
        solver.solution.obj_val
    }

    fn random_problem(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        let ys = xs.iter().map(|x| (3.0 * x[0]).sin() + x[1] + 0.1 * rng.gen::<f64>()).collect();
        (xs, ys)
    }

    #[test]
    fn single_zero_target_gives_zero_model() {
        let m = svr_train(&[vec![0.3]], &[0.0], gaussian_spec(1.0), 0.1, 0.0).unwrap();
        assert_eq!(m.alphas, vec![0.0]);
        assert_eq!(svr_predict(&m, &[0.9]).unwrap(), 0.0);
    }

    #[test]
    fn wide_tube_gives_zero_model() {
        let (xs, ys) = random_problem(8, 1);
        let eps = ys.iter().fold(0.0f64, |m, y| m.max(y.abs()));
        let m = svr_train(&xs, &ys, gaussian_spec(1.0), 0.01, eps).unwrap();
        assert!(m.alphas.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn prediction_is_kernel_expansion() {
        let xs = vec![vec![0.0], vec![1.0]];
        let m = SvrModel {
            alphas: vec![0.0, 1.0],
            training_inputs: xs.clone(),
            kernel: gaussian_spec(0.5),
            lambda: 1.0,
            epsilon_tube: 0.0,
        };
        assert_eq!(svr_predict(&m, &xs[1]).unwrap(), 1.0);
        assert!((svr_predict(&m, &[0.0]).unwrap() - (-2.0f64).exp()).abs() < 1e-15);
        assert!(svr_predict(&m, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn objective_matches_interior_point_reference() {
        for seed in 0..6 {
            let (xs, ys) = random_problem(5, seed);
            let spec = gaussian_spec(0.3);
            let k = gram_matrix(&xs, &spec).unwrap();
            for (lambda, eps) in [(0.1, 0.05), (1.0, 0.0), (1e-3, 0.1)] {
                let sol = svr_solve(&k, &ys, &SvrOptions::new(lambda, eps)).unwrap();
                let ours = primal_objective(&k, &ys, &sol.alphas, lambda, eps);
                let reference = reference_objective(&k, &ys, lambda, eps);
                assert!(
                    (ours - reference).abs() <= 1e-5 * reference.abs().max(1e-12),
                    "seed {seed}, λ={lambda}: {ours} vs {reference}"
                );
            }
        }
    }

    #[test]
    fn interpolates_smooth_data_with_small_lambda() {
        let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 19.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (4.0 * x[0]).sin()).collect();
        let m = svr_train(&xs, &ys, gaussian_spec(0.05), 1e-4, 0.0).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert!((svr_predict(&m, x).unwrap() - y).abs() <= 0.05);
        }
    }

    #[test]
    fn restart_from_other_feasible_point_reaches_same_objective() {
        let (xs, ys) = random_problem(15, 3);
        let k = gram_matrix(&xs, &gaussian_spec(0.2)).unwrap();
        let opts = SvrOptions::new(0.01, 0.02);
        let a = svr_solve(&k, &ys, &opts).unwrap();
        let start: Vec<f64> = (0..15).map(|i| if i % 2 == 0 { 1.0 } else { -0.5 }).collect();
        let b = svr_solve_from(&k, &ys, &opts, &start).unwrap();
        let oa = primal_objective(&k, &ys, &a.alphas, 0.01, 0.02);
        let ob = primal_objective(&k, &ys, &b.alphas, 0.01, 0.02);
        assert!((oa - ob).abs() <= 1e-8 * oa.abs().max(1.0), "{oa} vs {ob}");
    }

    #[test]
    fn rejects_bad_options_and_starts() {
        let k = Mat::<f64>::identity(2, 2);
        assert!(svr_solve(&k, &[1.0, 2.0], &SvrOptions::new(0.0, 0.1)).is_err());
        assert!(svr_solve(&k, &[1.0, 2.0], &SvrOptions::new(1.0, -0.1)).is_err());
        assert!(svr_solve_from(&k, &[1.0, 2.0], &SvrOptions::new(1.0, 0.1), &[2.0, 0.0]).is_err());
        assert!(svr_solve(&k, &[1.0], &SvrOptions::new(1.0, 0.1)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn trained_models_satisfy_kkt(seed in 0u64..1000, n in 2usize..25, log_lambda in -6.0f64..1.0, eps in 0.0f64..0.3) {
            let (xs, ys) = random_problem(n, seed);
            let lambda = 10f64.powf(log_lambda);
            let k = gram_matrix(&xs, &gaussian_spec(0.5)).unwrap();
            let sol = svr_solve(&k, &ys, &SvrOptions::new(lambda, eps)).unwrap();
            prop_assert!(sol.kkt_residual <= KKT_TOLERANCE);
            let beta: Vec<f64> = sol.alphas.iter().map(|a| a * lambda).collect();
            prop_assert!(beta.iter().all(|b| b.abs() <= 1.0));
        }
    }
}
