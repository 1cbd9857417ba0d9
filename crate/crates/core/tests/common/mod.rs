//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus};
use faer::Mat;
use microlp::{ComparisonOp, OptimizationDirection, Problem};
use turing_rdh::TorusGrid;

/// Dense 5-point periodic Laplacian built from explicit wrap-around indexing.
pub fn dense_laplacian(side: usize) -> Mat<f64> {
    let m = side * side;
    let idx = |r: usize, c: usize| (r % side) * side + (c % side);
    let mut l = Mat::zeros(m, m);
    for r in 0..side {
        for c in 0..side {
            let v = idx(r, c);
            for w in [idx(r + 1, c), idx(r + side - 1, c), idx(r, c + 1), idx(r, c + side - 1)] {
                l[(v, v)] += 1.0;
                l[(v, w)] -= 1.0;
            }
        }
    }
    l
}

/// Weighted graph Laplacian from an edge list.
pub fn weighted_laplacian(nodes: usize, edges: &[(usize, usize, f64)]) -> Mat<f64> {
    let mut l = Mat::zeros(nodes, nodes);
    for &(u, v, w) in edges {
        l[(u, u)] += w;
        l[(v, v)] += w;
        l[(u, v)] -= w;
        l[(v, u)] -= w;
    }
    l
}

/// Moore-Penrose pseudoinverse of a symmetric matrix from its eigendecomposition.
pub fn pseudoinverse(a: &Mat<f64>) -> Mat<f64> {
    let n = a.nrows();
    let eig = a.self_adjoint_eigen(faer::Side::Lower).unwrap();
    let (u, s) = (eig.U(), eig.S());
    let smax = (0..n).map(|k| s[k].abs()).fold(0.0, f64::max);
    let mut out = Mat::zeros(n, n);
    for k in 0..n {
        if s[k].abs() > 1e-12 * smax {
            for i in 0..n {
                for j in 0..n {
                    out[(i, j)] += u[(i, k)] * u[(j, k)] / s[k];
                }
            }
        }
    }
    out
}

pub fn pinv_resistance(lp: &Mat<f64>, v: usize, w: usize) -> f64 {
    lp[(v, v)] + lp[(w, w)] - 2.0 * lp[(v, w)]
}

/// Random torus graph with every edge weight drawn from `{1, 0.003}`.
pub fn random_torus_edges(side: usize, rng: &mut impl rand::Rng) -> Vec<(usize, usize, f64)> {
    let grid = TorusGrid::new(side).unwrap();
    grid.edges()
        .map(|(u, v)| (u, v, if rng.gen_bool(0.5) { 1.0 } else { 0.003 }))
        .collect()
}

/// Exact squared-distance transport cost between two histograms by LP.
pub fn lp_wasserstein(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mut p = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<_>> = (0..n)
        .map(|i| (0..n).map(|j| p.add_var(((i as f64) - (j as f64)).powi(2), (0.0, f64::INFINITY))).collect())
        .collect();
    for i in 0..n {
        let row: Vec<_> = (0..n).map(|j| (vars[i][j], 1.0)).collect();
        p.add_constraint(&row, ComparisonOp::Eq, x[i]);
    }
    for j in 0..n {
        let col: Vec<_> = (0..n).map(|i| (vars[i][j], 1.0)).collect();
        p.add_constraint(&col, ComparisonOp::Eq, y[j]);
    }
    match p.solve().unwrap() {
        microlp::SolveOutcome::Solution(sol) => sol.objective(),
        other => panic!("transport LP did not finish: {other:?}"),
    }
}

/// Interior-point optimum of `½λ αᵀKα + Σ max(0, |y − Kα| − ε)` as a QP in `(α, ξ)`.
pub fn reference_svr_objective(k: &Mat<f64>, y: &[f64], lambda: f64, eps: f64) -> f64 {
    let n = y.len();
    let mut pt = vec![vec![0.0; 2 * n]; 2 * n];
    for i in 0..n {
        for j in i..n {
            pt[i][j] = lambda * k[(i, j)];
        }
    }
    let p = CscMatrix::from(&pt);
    let mut q = vec![0.0; n];
    q.extend(std::iter::repeat_n(1.0, n));
    let mut a = vec![vec![0.0; 2 * n]; 3 * n];
    let mut b = vec![0.0; 3 * n];
    for i in 0..n {
        a[i][n + i] = -1.0;
        for j in 0..n {
            a[n + i][j] = -k[(i, j)];
            a[2 * n + i][j] = k[(i, j)];
        }
        a[n + i][n + i] = -1.0;
        b[n + i] = eps - y[i];
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

/// Column-major Kronecker product.
pub fn kron(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
    let (p, q) = (b.nrows(), b.ncols());
    Mat::from_fn(a.nrows() * p, a.ncols() * q, |i, j| a[(i / p, j / q)] * b[(i % p, j % q)])
}

pub fn vec_of(m: &Mat<f64>) -> Mat<f64> {
    let r = m.nrows();
    Mat::from_fn(r * m.ncols(), 1, |i, _| m[(i % r, i / r)])
}

pub fn max_abs(m: &Mat<f64>) -> f64 {
    (0..m.ncols()).flat_map(|j| (0..m.nrows()).map(move |i| (i, j))).map(|(i, j)| m[(i, j)].abs()).fold(0.0, f64::max)
}

/// Central finite differences of `f` at `p`.
pub fn numeric_gradient(p: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|i| {
            let h = 1e-6 * p[i].abs().max(1.0);
            q[i] = p[i] + h;
            let up = f(&q);
            q[i] = p[i] - h;
            let down = f(&q);
            q[i] = p[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Cyclic shift of a row-major field.
pub fn translate(side: usize, field: &[f64], dr: usize, dc: usize) -> Vec<f64> {
    let mut out = vec![0.0; field.len()];
    for r in 0..side {
        for c in 0..side {
            out[((r + dr) % side) * side + (c + dc) % side] = field[r * side + c];
        }
    }
    out
}

/// Quarter turn of a row-major field.
pub fn rotate(side: usize, field: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; field.len()];
    for r in 0..side {
        for c in 0..side {
            out[c * side + (side - 1 - r)] = field[r * side + c];
        }
    }
    out
}
