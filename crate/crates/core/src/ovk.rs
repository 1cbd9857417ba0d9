//! Operator-valued kernel regression for joint parameter vectors.
//!
//! With input Gram `K`, output Gram `L` (Gaussian kernel on targets) and
//! `T = L − (K + nεI)⁻¹ K L`, training solves `T U K + nλ U = I` for the
//! `n × n` matrix `U` by global GMRES. A new input `x` is embedded as
//! `v = T U k_x`, and the prediction is the pre-image
//! `argmax_y Σ_i v_i exp(−‖y − y_i‖² / γ_out)` over the unit box.

use faer::linalg::solvers::{Llt, Solve};
use faer::{Mat, Side};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gram_matrix, KernelKind, KernelSpec};

pub const DEFAULT_EPS_REG: f64 = 1e-4;
pub const PREIMAGE_STARTS: usize = 5;
pub const PREIMAGE_MAX_STEPS: usize = 500;
pub const PREIMAGE_GRAD_TOL: f64 = 1e-8;
const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmresOptions {
    pub restart: usize,
    pub max_restarts: usize,
    pub tolerance: f64,
}

impl Default for GmresOptions {
    fn default() -> Self {
        Self {
            restart: 50,
            max_restarts: 20,
            tolerance: 1e-8,
        }
    }
}

/// Trace inner product `tr(AᵀB)`.
fn frob_dot(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            s += a[(i, j)] * b[(i, j)];
        }
    }
    s
}

fn frob_norm(a: &Mat<f64>) -> f64 {
    frob_dot(a, a).sqrt()
}

/// `y ← y + s·x`.
fn axpy(y: &mut Mat<f64>, s: f64, x: &Mat<f64>) {
    for j in 0..y.ncols() {
        for i in 0..y.nrows() {
            y[(i, j)] += s * x[(i, j)];
        }
    }
}

/// Restarted global GMRES for a linear operator on matrices, using the trace
/// inner product. Returns the solution and its relative residual.
pub fn global_gmres(
    apply: impl Fn(&Mat<f64>) -> Mat<f64>,
    b: &Mat<f64>,
    x0: Mat<f64>,
    opts: &GmresOptions,
) -> Result<(Mat<f64>, f64)> {
    let b_norm = frob_norm(b);
    if b_norm == 0.0 {
        return Ok((Mat::zeros(b.nrows(), b.ncols()), 0.0));
    }
    let m = opts.restart.max(1);
    let mut x = x0;
    let mut rel = f64::INFINITY;
    for _ in 0..=opts.max_restarts {
        let mut r = b.clone();
        axpy(&mut r, -1.0, &apply(&x));
        let beta = frob_norm(&r);
        rel = beta / b_norm;
        if rel <= opts.tolerance {
            return Ok((x, rel));
        }
        let mut basis = vec![r * faer::Scale(1.0 / beta)];
        // Hessenberg columns, Givens rotations and the rotated right-hand side.
        let mut h: Vec<Vec<f64>> = Vec::new();
        let mut cs: Vec<(f64, f64)> = Vec::new();
        let mut g = vec![beta];
        for j in 0..m {
            let mut w = apply(&basis[j]);
            let mut col = vec![0.0; j + 2];
            for (i, vi) in basis.iter().enumerate() {
                col[i] = frob_dot(vi, &w);
                axpy(&mut w, -col[i], vi);
            }
            col[j + 1] = frob_norm(&w);
            for (i, &(c, s)) in cs.iter().enumerate() {
                let (a, bb) = (col[i], col[i + 1]);
                col[i] = c * a + s * bb;
                col[i + 1] = -s * a + c * bb;
            }
            let (a, bb) = (col[j], col[j + 1]);
            let rho = a.hypot(bb);
            let (c, s) = if rho == 0.0 { (1.0, 0.0) } else { (a / rho, bb / rho) };
            col[j] = rho;
            col[j + 1] = 0.0;
            cs.push((c, s));
            g.push(-s * g[j]);
            g[j] *= c;
            let breakdown = frob_norm(&w) <= 1e-300;
            h.push(col);
            rel = g[j + 1].abs() / b_norm;
            if rel <= opts.tolerance || breakdown || j + 1 == m {
                break;
            }
            let norm = frob_norm(&w);
            basis.push(w * faer::Scale(1.0 / norm));
        }
        // Back substitution on the triangular system.
        let k = h.len();
        let mut coef = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = g[i];
            for jj in i + 1..k {
                s -= h[jj][i] * coef[jj];
            }
            coef[i] = s / h[i][i];
        }
        for (c, v) in coef.iter().zip(&basis) {
            axpy(&mut x, *c, v);
        }
        if coef.iter().any(|c| !c.is_finite()) {
            return Err(Error::Training("global GMRES produced non-finite iterates".into()));
        }
    }
    let mut r = b.clone();
    axpy(&mut r, -1.0, &apply(&x));
    rel = rel.min(frob_norm(&r) / b_norm);
    if rel <= opts.tolerance {
        Ok((x, rel))
    } else {
        Err(Error::Training(format!(
            "global GMRES stagnated at relative residual {rel:e}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OvkModel {
    pub training_inputs: Vec<Vec<f64>>,
    pub training_targets: Vec<Vec<f64>>,
    pub input_kernel: KernelSpec,
    pub output_kernel: KernelSpec,
    pub lambda: f64,
    pub eps_reg: f64,
    pub k_n: Mat<f64>,
    pub l_n: Mat<f64>,
    pub t_n: Mat<f64>,
    pub u: Mat<f64>,
}

/// `T = L − (K + nεI)⁻¹ K L`.
pub fn conditional_operator(k: &Mat<f64>, l: &Mat<f64>, eps_reg: f64) -> Result<Mat<f64>> {
    let n = k.nrows();
    let mut reg = k.clone();
    for i in 0..n {
        reg[(i, i)] += n as f64 * eps_reg;
    }
    let llt = Llt::new(reg.as_ref(), Side::Lower)
        .map_err(|e| Error::Numerical(format!("regularized Gram is not positive definite: {e:?}")))?;
    let kl = k * l;
    Ok(l - llt.solve(&kl))
}

pub fn ovk_train(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    input_kernel: KernelSpec,
    output_kernel: KernelSpec,
    lambda: f64,
    eps_reg: f64,
) -> Result<OvkModel> {
    let k = gram_matrix(inputs, &input_kernel)?;
    ovk_train_gram(inputs, targets, k, input_kernel, output_kernel, lambda, eps_reg, &GmresOptions::default())
}

/// [`ovk_train`] with a precomputed input Gram matrix.
#[allow(clippy::too_many_arguments)]
pub fn ovk_train_gram(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    k: Mat<f64>,
    input_kernel: KernelSpec,
    output_kernel: KernelSpec,
    lambda: f64,
    eps_reg: f64,
    gmres: &GmresOptions,
) -> Result<OvkModel> {
    let n = inputs.len();
    if n < 2 {
        return Err(Error::Training("operator-valued regression needs at least 2 samples".into()));
    }
    if targets.len() != n {
        return Err(Error::shape(n, targets.len()));
    }
    if k.nrows() != n || k.ncols() != n {
        return Err(Error::shape(n, k.nrows()));
    }
    if output_kernel.kind != KernelKind::GaussianOutput {
        return Err(Error::Config("the output kernel must be gaussian_output".into()));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    if !(eps_reg > 0.0 && eps_reg.is_finite()) {
        return Err(Error::Config(format!("eps_reg must be positive, got {eps_reg}")));
    }
    let l = gram_matrix(targets, &output_kernel)?;
    let t = conditional_operator(&k, &l, eps_reg)?;
    let shift = n as f64 * lambda;
    let apply = |u: &Mat<f64>| {
        let mut out = &(&t * u) * &k;
        axpy(&mut out, shift, u);
        out
    };
    let rhs = Mat::<f64>::identity(n, n);
    let x0 = Mat::<f64>::identity(n, n) * faer::Scale(1.0 / shift);
    let (u, _) = global_gmres(apply, &rhs, x0, gmres)?;
    Ok(OvkModel {
        training_inputs: inputs.to_vec(),
        training_targets: targets.to_vec(),
        input_kernel,
        output_kernel,
        lambda,
        eps_reg,
        k_n: k,
        l_n: l,
        t_n: t,
        u,
    })
}

/// `v = T U k_x`.
pub fn ovk_embed(model: &OvkModel, x: &[f64]) -> Result<Vec<f64>> {
    let n = model.training_inputs.len();
    let kx = Mat::from_fn(n, 1, |i, _| model.input_kernel.eval(&model.training_inputs[i], x).unwrap_or(f64::NAN));
    if (0..n).any(|i| kx[(i, 0)].is_nan()) {
        // Surface the kernel error itself.
        for xi in &model.training_inputs {
            model.input_kernel.eval(xi, x)?;
        }
    }
    Ok(embed_kx(model, &kx))
}

fn embed_kx(model: &OvkModel, kx: &Mat<f64>) -> Vec<f64> {
    let v = &model.t_n * (&model.u * kx);
    (0..v.nrows()).map(|i| v[(i, 0)]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preimage {
    pub y: Vec<f64>,
    /// `1 − 2 Σ v_i l(y, y_i)` at `y` before clipping.
    pub objective: f64,
    /// Set when every start failed its line search.
    pub all_starts_failed: bool,
}

pub fn ovk_predict(model: &OvkModel, x: &[f64]) -> Result<Preimage> {
    let v = ovk_embed(model, x)?;
    let p = preimage(&v, &model.training_targets, model.output_kernel.gamma)?;
    if p.all_starts_failed {
        warn!("pre-image search failed from every start; returning the best start");
    }
    Ok(p)
}

fn preimage_objective(y: &[f64], v: &[f64], targets: &[Vec<f64>], gamma: f64) -> (f64, Vec<f64>) {
    let mut value = 1.0;
    let mut grad = vec![0.0; y.len()];
    for (vi, yi) in v.iter().zip(targets) {
        let d2: f64 = y.iter().zip(yi).map(|(a, b)| (a - b) * (a - b)).sum();
        let w = vi * (-d2 / gamma).exp();
        value -= 2.0 * w;
        for (g, (a, b)) in grad.iter_mut().zip(y.iter().zip(yi)) {
            *g += 4.0 * w * (a - b) / gamma;
        }
    }
    (value, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Descent {
    pub y: Vec<f64>,
    pub objective: f64,
    pub failed: bool,
    pub trace: Vec<f64>,
}

/// Gradient descent with Armijo backtracking on the pre-image objective.
pub(crate) fn descend(start: &[f64], v: &[f64], targets: &[Vec<f64>], gamma: f64) -> Descent {
    let mut y = start.to_vec();
    let (mut f, mut g) = preimage_objective(&y, v, targets, gamma);
    let mut trace = vec![f];
    let mut step = 1.0;
    let mut failed = false;
    for _ in 0..PREIMAGE_MAX_STEPS {
        let gn2: f64 = g.iter().map(|x| x * x).sum();
        if gn2.sqrt() <= PREIMAGE_GRAD_TOL {
            break;
        }
        let mut accepted = None;
        while step >= MIN_STEP {
            let cand: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let (fc, gc) = preimage_objective(&cand, v, targets, gamma);
            if fc <= f - ARMIJO_C * step * gn2 {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, fc, gc)) => {
                y = cand;
                f = fc;
                g = gc;
                trace.push(f);
                step *= 2.0;
            }
            None => {
                failed = gn2.sqrt() > 1e-6;
                break;
            }
        }
    }
    Descent { y, objective: f, failed, trace }
}

/// Multi-start pre-image search from the training targets with the largest
/// affinity `Σ_j v_j l(y_i, y_j)` and their mean; the result is clipped to
/// the unit box.
pub fn preimage(v: &[f64], targets: &[Vec<f64>], gamma: f64) -> Result<Preimage> {
    if v.len() != targets.len() {
        return Err(Error::shape(targets.len(), v.len()));
    }
    if targets.is_empty() {
        return Err(Error::Domain("pre-image needs training targets".into()));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Domain(format!("output gamma must be positive, got {gamma}")));
    }
    let d = targets[0].len();
    let mut ranked: Vec<(f64, usize)> = targets
        .iter()
        .enumerate()
        .map(|(i, yi)| (preimage_objective(yi, v, targets, gamma).0, i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let top: Vec<&Vec<f64>> = ranked.iter().take(PREIMAGE_STARTS).map(|&(_, i)| &targets[i]).collect();
    let mut starts: Vec<Vec<f64>> = top.iter().map(|y| y.to_vec()).collect();
    let mean: Vec<f64> = (0..d).map(|k| top.iter().map(|y| y[k]).sum::<f64>() / top.len() as f64).collect();
    starts.push(mean);

    let runs: Vec<Descent> = starts.iter().map(|s| descend(s, v, targets, gamma)).collect();
    let all_failed = runs.iter().all(|r| r.failed);
    let best = runs
        .into_iter()
        .filter(|r| r.objective.is_finite())
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .ok_or_else(|| Error::Numerical("pre-image objective is not finite".into()))?;
    Ok(Preimage {
        y: best.y.iter().map(|x| x.clamp(0.0, 1.0)).collect(),
        objective: best.objective,
        all_starts_failed: all_failed,
    })
}
