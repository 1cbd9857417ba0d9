//! Periodic square grids, the 5-point graph Laplacian and the FFT-diagonalised
//! backward-Euler diffusion operator `I + hδL`.
//!
//! Fields are stored row-major: node id `row * n + col`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular `n × n` grid with wrap-around adjacency in both directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TorusGrid {
    n: usize,
}

impl TorusGrid {
    pub fn new(side: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::Config("grid side must be positive".into()));
        }
        Ok(Self { n: side })
    }

    /// Side length `n_r`.
    pub fn side(&self) -> usize {
        self.n
    }

    /// Node count `m = n_r²`.
    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, row: usize, col: usize) -> usize {
        (row % self.n) * self.n + (col % self.n)
    }

    pub fn coords(&self, v: usize) -> (usize, usize) {
        (v / self.n, v % self.n)
    }

    pub fn right(&self, v: usize) -> usize {
        let (r, c) = self.coords(v);
        r * self.n + (c + 1) % self.n
    }

    pub fn down(&self, v: usize) -> usize {
        let (r, c) = self.coords(v);
        ((r + 1) % self.n) * self.n + c
    }

    /// The four stencil neighbours (up, down, left, right). On grids with
    /// side 1 or 2 some of them coincide, which matches the periodic stencil.
    pub fn neighbors(&self, v: usize) -> [usize; 4] {
        let n = self.n;
        let (r, c) = self.coords(v);
        [
            ((r + n - 1) % n) * n + c,
            ((r + 1) % n) * n + c,
            r * n + (c + n - 1) % n,
            r * n + (c + 1) % n,
        ]
    }

    /// Each undirected grid edge exactly once: `(v, right(v))` then `(v, down(v))`
    /// for every node, giving `2m` edges.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len()).flat_map(move |v| [(v, self.right(v)), (v, self.down(v))])
    }

    fn check(&self, v: usize) -> Result<()> {
        if v >= self.len() {
            return Err(Error::Index {
                index: v,
                len: self.len(),
            });
        }
        Ok(())
    }

    /// Squared wrap-around displacement, exact in integers.
    pub fn toroidal_offset_sq(&self, v: usize, w: usize) -> Result<usize> {
        self.check(v)?;
        self.check(w)?;
        let (rv, cv) = self.coords(v);
        let (rw, cw) = self.coords(w);
        let dr = wrap_delta(rv, rw, self.n);
        let dc = wrap_delta(cv, cw, self.n);
        Ok(dr * dr + dc * dc)
    }

    /// Euclidean distance with per-axis displacement `min(|Δ|, n − |Δ|)`.
    pub fn toroidal_distance(&self, v: usize, w: usize) -> Result<f64> {
        Ok((self.toroidal_offset_sq(v, w)? as f64).sqrt())
    }

    fn check_field(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.len() {
            return Err(Error::shape(self.len(), v.len()));
        }
        Ok(())
    }
}

fn wrap_delta(a: usize, b: usize, n: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(n - d)
}

impl fmt::Display for TorusGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.n, self.n)
    }
}

/// `L v` for the positive-semidefinite periodic 5-point Laplacian
/// (4 on the diagonal, −1 per neighbour).
pub fn laplacian_matvec(grid: &TorusGrid, v: &[f64]) -> Result<Vec<f64>> {
    grid.check_field(v)?;
    let mut out = vec![0.0; v.len()];
    laplacian_into(grid, v, &mut out);
    Ok(out)
}

pub(crate) fn laplacian_into(grid: &TorusGrid, v: &[f64], out: &mut [f64]) {
    let n = grid.side();
    for r in 0..n {
        let up = ((r + n - 1) % n) * n;
        let down = ((r + 1) % n) * n;
        let row = r * n;
        for c in 0..n {
            let left = (c + n - 1) % n;
            let right = (c + 1) % n;
            out[row + c] = 4.0 * v[row + c]
                - v[up + c]
                - v[down + c]
                - v[row + left]
                - v[row + right];
        }
    }
}

/// Fourier multiplier of `I + hδL` at frequency `(p, q)`.
pub fn operator_eigenvalue(side: usize, h_delta: f64, p: usize, q: usize) -> f64 {
    let n = side as f64;
    1.0 + h_delta * (4.0 - 2.0 * (2.0 * PI * p as f64 / n).cos() - 2.0 * (2.0 * PI * q as f64 / n).cos())
}

/// Reusable buffers for [`SpectralOperator::solve_into`].
pub struct SpectralWorkspace {
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl SpectralWorkspace {
    pub fn new(op: &SpectralOperator) -> Self {
        let scratch_len = op
            .forward
            .get_inplace_scratch_len()
            .max(op.inverse.get_inplace_scratch_len());
        Self {
            buf: vec![Complex64::new(0.0, 0.0); op.grid.len()],
            scratch: vec![Complex64::new(0.0, 0.0); scratch_len],
        }
    }
}

/// Solver for `(I + hδL) x = b` on a torus grid, diagonalised by the 2-D DFT.
#[derive(Clone)]
pub struct SpectralOperator {
    grid: TorusGrid,
    h_delta: f64,
    eigenvalues: Vec<f64>,
    // 1 / (λ · m): folds the inverse-DFT normalisation into the division.
    inv_scaled: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for SpectralOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralOperator")
            .field("grid", &self.grid)
            .field("h_delta", &self.h_delta)
            .finish_non_exhaustive()
    }
}

impl SpectralOperator {
    pub fn new(grid: TorusGrid, h_delta: f64) -> Result<Self> {
        if !(h_delta >= 0.0 && h_delta.is_finite()) {
            return Err(Error::Domain(format!("h·δ must be finite and nonnegative, got {h_delta}")));
        }
        let n = grid.side();
        let m = grid.len() as f64;
        let mut eigenvalues = Vec::with_capacity(grid.len());
        for p in 0..n {
            for q in 0..n {
                eigenvalues.push(operator_eigenvalue(n, h_delta, p, q));
            }
        }
        let inv_scaled = eigenvalues.iter().map(|&l| 1.0 / (l * m)).collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            grid,
            h_delta,
            eigenvalues,
            inv_scaled,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        })
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn h_delta(&self) -> f64 {
        self.h_delta
    }

    /// Fourier multipliers, indexed `p * n + q`.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; b.len()];
        let mut ws = SpectralWorkspace::new(self);
        self.solve_into(b, &mut out, &mut ws)?;
        Ok(out)
    }

    /// Forward 2-D FFT, elementwise division by the eigenvalues, inverse
    /// 2-D FFT. The imaginary residue is dropped.
    pub fn solve_into(&self, b: &[f64], out: &mut [f64], ws: &mut SpectralWorkspace) -> Result<()> {
        self.grid.check_field(b)?;
        self.grid.check_field(out)?;
        let n = self.grid.side();
        let buf = &mut ws.buf;
        for (z, &x) in buf.iter_mut().zip(b) {
            *z = Complex64::new(x, 0.0);
        }
        // rows, then columns via transposition; the multiplier table is
        // symmetric in (p, q) so it can be applied in transposed layout.
        self.forward.process_with_scratch(buf, &mut ws.scratch);
        transpose_square(buf, n);
        self.forward.process_with_scratch(buf, &mut ws.scratch);
        for (z, &s) in buf.iter_mut().zip(&self.inv_scaled) {
            *z *= s;
        }
        self.inverse.process_with_scratch(buf, &mut ws.scratch);
        transpose_square(buf, n);
        self.inverse.process_with_scratch(buf, &mut ws.scratch);
        for (x, z) in out.iter_mut().zip(buf.iter()) {
            *x = z.re;
        }
        Ok(())
    }
}

fn transpose_square(buf: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            buf.swap(i * n + j, j * n + i);
        }
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn field(m: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, m)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn solve_inverts_operator(x in field(36), hd in 0.0f64..20.0) {
            let grid = TorusGrid::new(6).unwrap();
            let op = SpectralOperator::new(grid, hd).unwrap();
            let lx = laplacian_matvec(&grid, &x).unwrap();
            let b: Vec<f64> = x.iter().zip(&lx).map(|(a, l)| a + hd * l).collect();
            let y = op.solve(&b).unwrap();
            let num: f64 = y.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
            let den: f64 = x.iter().map(|a| a * a).sum::<f64>().max(1e-300);
            prop_assert!((num / den).sqrt() <= 1e-10);
        }

        #[test]
        fn laplacian_symmetric_psd(v in field(25), w in field(25)) {
            let grid = TorusGrid::new(5).unwrap();
            let lv = laplacian_matvec(&grid, &v).unwrap();
            let lw = laplacian_matvec(&grid, &w).unwrap();
            let a: f64 = lv.iter().zip(&w).map(|(x, y)| x * y).sum();
            let b: f64 = v.iter().zip(&lw).map(|(x, y)| x * y).sum();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            let q: f64 = v.iter().zip(&lv).map(|(x, y)| x * y).sum();
            prop_assert!(q >= -1e-9);
        }

        #[test]
        fn solve_commutes_with_shift(b in field(36), dr in 0usize..6, dc in 0usize..6) {
            let grid = TorusGrid::new(6).unwrap();
            let op = SpectralOperator::new(grid, 4.0).unwrap();
            let shift = |f: &[f64]| {
                let mut out = vec![0.0; 36];
                for r in 0..6 { for c in 0..6 {
                    out[grid.node(r + dr, c + dc)] = f[grid.node(r, c)];
                }}
                out
            };
            let a = op.solve(&shift(&b)).unwrap();
            let s = shift(&op.solve(&b).unwrap());
            for (x, y) in a.iter().zip(&s) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }
}
