//! Reaction terms, equilibria, Jacobians and the Turing-instability test.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gierer-Meinhardt constants. `D = s · diag(1, δ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub delta: f64,
    pub s: f64,
}

impl GmParams {
    pub fn new(a: f64, b: f64, c: f64, delta: f64, s: f64) -> Result<Self> {
        let p = Self { a, b, c, delta, s };
        p.validate()?;
        Ok(p)
    }

    /// `b`, `δ`, `s` must be strictly positive; `a` and `c` may be zero
    /// (the `c = 0` limit has the closed-form equilibrium `u₁ = (1+a)/b`).
    pub fn validate(&self) -> Result<()> {
        let all = self.to_array();
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParams(format!("non-finite value in {self:?}")));
        }
        if self.a < 0.0 || self.c < 0.0 {
            return Err(Error::InvalidParams(format!("a and c must be nonnegative: {self:?}")));
        }
        if self.b <= 0.0 || self.delta <= 0.0 || self.s <= 0.0 {
            return Err(Error::InvalidParams(format!("b, delta and s must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.a, self.b, self.c, self.delta, self.s]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            &[a, b, c, delta, s] => Self::new(a, b, c, delta, s),
            _ => Err(Error::shape(5, v.len())),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "a" => Some(self.a),
            "b" => Some(self.b),
            "c" => Some(self.c),
            "delta" => Some(self.delta),
            "s" => Some(self.s),
            _ => None,
        }
    }
}

/// A spatially extended reaction system `∂u/∂t = f(u) + D Δu` with diagonal `D`.
pub trait ReactionModel: Send + Sync {
    fn species_count(&self) -> usize;

    /// Diagonal of `D`.
    fn diffusion(&self) -> Vec<f64>;

    /// `f(u)` without domain checks; used on the hot path of the simulator.
    fn reaction_unchecked(&self, u: &[f64], out: &mut [f64]);

    fn check_domain(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.species_count() {
            return Err(Error::shape(self.species_count(), u.len()));
        }
        if u.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Domain(format!("concentrations must be positive, got {u:?}")));
        }
        Ok(())
    }

    fn reaction(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_domain(u)?;
        let mut out = vec![0.0; u.len()];
        self.reaction_unchecked(u, &mut out);
        Ok(out)
    }

    /// `∂f_i/∂u_j`.
    fn jacobian(&self, u: &[f64]) -> Result<Mat<f64>>;

    /// A positive root of `f`.
    fn equilibrium(&self) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GiererMeinhardt {
    pub params: GmParams,
}

impl GiererMeinhardt {
    pub fn new(params: GmParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }
}

impl ReactionModel for GiererMeinhardt {
    fn species_count(&self) -> usize {
        2
    }

    fn diffusion(&self) -> Vec<f64> {
        vec![self.params.s, self.params.s * self.params.delta]
    }

    #[inline]
    fn reaction_unchecked(&self, u: &[f64], out: &mut [f64]) {
        let [f1, f2] = gm_reaction_raw(&self.params, u[0], u[1]);
        out[0] = f1;
        out[1] = f2;
    }

    fn jacobian(&self, u: &[f64]) -> Result<Mat<f64>> {
        self.check_domain(u)?;
        let GmParams { b, c, .. } = self.params;
        let (u1, u2) = (u[0], u[1]);
        let q = 1.0 + c * u1 * u1;
        let mut j = Mat::zeros(2, 2);
        j[(0, 0)] = -b + 2.0 * u1 / (u2 * q * q);
        j[(0, 1)] = -u1 * u1 / (u2 * u2 * q);
        j[(1, 0)] = 2.0 * u1;
        j[(1, 1)] = -1.0;
        Ok(j)
    }

    fn equilibrium(&self) -> Result<Vec<f64>> {
        gm_equilibrium(&self.params).map(|u| u.to_vec())
    }
}

#[inline]
pub(crate) fn gm_reaction_raw(p: &GmParams, u1: f64, u2: f64) -> [f64; 2] {
    let sq = u1 * u1;
    [p.a - p.b * u1 + sq / (u2 * (1.0 + p.c * sq)), sq - u2]
}

/// `f(u) = (a − b·u₁ + u₁²/(u₂(1 + c·u₁²)), u₁² − u₂)`.
pub fn gm_reaction(p: &GmParams, u: [f64; 2]) -> Result<[f64; 2]> {
    if !(u[0] > 0.0 && u[1] > 0.0) {
        return Err(Error::Domain(format!("concentrations must be positive, got {u:?}")));
    }
    Ok(gm_reaction_raw(p, u[0], u[1]))
}

/// Smallest positive equilibrium: `u₂ = u₁²` and `g(u₁) = a − b·u₁ + 1/(1 + c·u₁²) = 0`.
///
/// `g(0⁺) = 1 + a > 0` and `g((1+a)/b + 1) < 0`, so a sign change exists in
/// the bracket. A uniform scan locates the first one, bisection narrows it
/// and Newton polishes the root.
pub fn gm_equilibrium(p: &GmParams) -> Result<[f64; 2]> {
    p.validate()?;
    let g = |x: f64| p.a - p.b * x + 1.0 / (1.0 + p.c * x * x);
    let dg = |x: f64| {
        let q = 1.0 + p.c * x * x;
        -p.b - 2.0 * p.c * x / (q * q)
    };
    if p.c == 0.0 {
        let u1 = (1.0 + p.a) / p.b;
        return Ok([u1, u1 * u1]);
    }

    let lo0 = 1e-8;
    let hi0 = (1.0 + p.a) / p.b + 1.0;
    const SCAN: usize = 2048;
    let mut bracket = None;
    let mut prev = lo0;
    let mut gprev = g(prev);
    for k in 1..=SCAN {
        let x = lo0 + (hi0 - lo0) * k as f64 / SCAN as f64;
        let gx = g(x);
        if gx == 0.0 {
            return Ok([x, x * x]);
        }
        if gprev > 0.0 && gx < 0.0 {
            bracket = Some((prev, x));
            break;
        }
        prev = x;
        gprev = gx;
    }
    let (mut lo, mut hi) = bracket
        .ok_or_else(|| Error::NoEquilibrium(format!("no sign change of g on ({lo0}, {hi0}) for {p:?}")))?;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..8 {
        let d = dg(x);
        if d == 0.0 {
            break;
        }
        let next = x - g(x) / d;
        if !(next > lo - (hi - lo) && next < hi + (hi - lo)) {
            break;
        }
        x = next;
    }
    if !(x > 0.0) || g(x).abs() > 1e-12 {
        return Err(Error::NoEquilibrium(format!("root refinement failed for {p:?} (g = {})", g(x))));
    }
    Ok([x, x * x])
}

/// Largest real part of the eigenvalues of a real square matrix.
pub fn max_real_eigenvalue(m: &Mat<f64>) -> Result<f64> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::shape(n, m.ncols()));
    }
    match n {
        0 => Err(Error::shape(1, 0)),
        1 => Ok(m[(0, 0)]),
        2 => {
            let tr = m[(0, 0)] + m[(1, 1)];
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            let disc = 0.25 * tr * tr - det;
            Ok(if disc >= 0.0 { 0.5 * tr + disc.sqrt() } else { 0.5 * tr })
        }
        _ => {
            let eig = m
                .eigenvalues()
                .map_err(|e| Error::Numerical(format!("eigenvalue computation failed: {e:?}")))?;
            Ok(eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max))
        }
    }
}

fn spatial_jacobian(j: &Mat<f64>, diffusion: &[f64], q2: f64) -> Mat<f64> {
    let mut js = j.clone();
    for (i, d) in diffusion.iter().enumerate() {
        js[(i, i)] -= q2 * d;
    }
    js
}

/// `max_i Re λ_i(J(u*) − q²D)`.
pub fn dispersion(model: &dyn ReactionModel, u_star: &[f64], q2: f64) -> Result<f64> {
    if !(q2 >= 0.0) {
        return Err(Error::Domain(format!("q² must be nonnegative, got {q2}")));
    }
    let j = model.jacobian(u_star)?;
    max_real_eigenvalue(&spatial_jacobian(&j, &model.diffusion(), q2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub equilibrium: Vec<f64>,
    pub ode_stable: bool,
    pub turing: bool,
    /// Maximiser of the dispersion relation; 0 when there is no instability.
    pub q2_star: f64,
    pub max_growth: f64,
}

pub const DISPERSION_SCAN_POINTS: usize = 512;
pub const DISPERSION_Q2_MIN: f64 = 1e-4;

/// Finite stand-in for `‖q‖ → ∞`: `10·(|tr J| + |det J| + 1) / min_i D_ii`.
pub fn dispersion_q2_max(j: &Mat<f64>, diffusion: &[f64]) -> f64 {
    let n = j.nrows();
    let tr: f64 = (0..n).map(|i| j[(i, i)]).sum();
    let det = if n == 2 {
        j[(0, 0)] * j[(1, 1)] - j[(0, 1)] * j[(1, 0)]
    } else {
        j.determinant()
    };
    let dmin = diffusion.iter().cloned().fold(f64::INFINITY, f64::min);
    10.0 * (tr.abs() + det.abs() + 1.0) / dmin
}

/// Log-uniform sample of `(q², max Re λ̃(q²))` on `[1e-4, q2_max]`.
pub fn dispersion_curve(model: &dyn ReactionModel, u_star: &[f64], points: usize) -> Result<Vec<(f64, f64)>> {
    let j = model.jacobian(u_star)?;
    let diffusion = model.diffusion();
    let q2_max = dispersion_q2_max(&j, &diffusion);
    let lo = DISPERSION_Q2_MIN.ln();
    let hi = q2_max.ln();
    (0..points)
        .map(|k| {
            let t = if points > 1 { k as f64 / (points - 1) as f64 } else { 0.0 };
            let q2 = if k + 1 == points { q2_max } else { (lo + t * (hi - lo)).exp() };
            max_real_eigenvalue(&spatial_jacobian(&j, &diffusion, q2)).map(|g| (q2, g))
        })
        .collect()
}

/// Turing conditions: stable ODE equilibrium, positive growth at some finite
/// `q²`, and decay at the far end of the scan.
pub fn turing_check(model: &dyn ReactionModel, u_star: &[f64]) -> Result<StabilityReport> {
    let f = model.reaction(u_star)?;
    let residual = f.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !(residual <= 1e-8) {
        return Err(Error::Precondition(format!(
            "u* is not an equilibrium (residual {residual:e})"
        )));
    }
    let j = model.jacobian(u_star)?;
    let diffusion = model.diffusion();
    let growth0 = max_real_eigenvalue(&j)?;
    let ode_stable = growth0 < 0.0;

    let curve = dispersion_curve(model, u_star, DISPERSION_SCAN_POINTS)?;
    let (kmax, &(mut q2_best, mut g_best)) = curve
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("scan is nonempty");
    if kmax > 0 && kmax + 1 < curve.len() {
        let eval = |q2: f64| max_real_eigenvalue(&spatial_jacobian(&j, &diffusion, q2));
        let (q2, g) = golden_section_max(eval, curve[kmax - 1].0, curve[kmax + 1].0)?;
        if g > g_best {
            q2_best = q2;
            g_best = g;
        }
    }
    let endpoint_decays = curve.last().expect("scan is nonempty").1 < 0.0;
    let turing = ode_stable && g_best > 0.0 && endpoint_decays;
    Ok(StabilityReport {
        equilibrium: u_star.to_vec(),
        ode_stable,
        turing,
        q2_star: if turing { q2_best } else { 0.0 },
        max_growth: g_best,
    })
}

fn golden_section_max(f: impl Fn(f64) -> Result<f64>, mut a: f64, mut b: f64) -> Result<(f64, f64)> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    for _ in 0..80 {
        if (b - a).abs() <= 1e-12 * (a.abs() + b.abs()) {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc > fd { (c, fc) } else { (d, fd) })
}

/// Convenience: equilibrium plus [`turing_check`] for Gierer-Meinhardt.
pub fn gm_stability(p: &GmParams) -> Result<StabilityReport> {
    let model = GiererMeinhardt::new(*p)?;
    let u = model.equilibrium()?;
    turing_check(&model, &u)
}
