//! Kernels on histograms and on parameter vectors.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on total mass when comparing two histograms by transport.
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Chi2Symmetric,
    Chi2Exponential,
    Wasserstein,
    GaussianOutput,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Chi2Symmetric => "chi2_symmetric",
            KernelKind::Chi2Exponential => "chi2_exponential",
            KernelKind::Wasserstein => "wasserstein",
            KernelKind::GaussianOutput => "gaussian_output",
        }
    }

    pub fn uses_gamma(self) -> bool {
        self != KernelKind::Chi2Symmetric
    }
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "chi2_symmetric" | "chi2" => KernelKind::Chi2Symmetric,
            "chi2_exponential" | "exp_chi2" => KernelKind::Chi2Exponential,
            "wasserstein" => KernelKind::Wasserstein,
            "gaussian_output" | "gaussian" => KernelKind::GaussianOutput,
            other => return Err(Error::Config(format!("unknown kernel '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub gamma: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, gamma: f64) -> Result<Self> {
        let spec = Self { kind, gamma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.uses_gamma() && !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self.kind {
            KernelKind::Chi2Symmetric => chi2_symmetric(x, y),
            KernelKind::Chi2Exponential => chi2_exponential(x, y, self.gamma),
            KernelKind::Wasserstein => wasserstein_kernel(x, y, self.gamma),
            KernelKind::GaussianOutput => gaussian_output(x, y, self.gamma),
        }
    }
}

fn same_len(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() == y.len() {
        Ok(())
    } else {
        Err(Error::shape(x.len(), y.len()))
    }
}

fn positive_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("gamma must be positive, got {gamma}")))
    }
}

/// `Σ x_i y_i / (x_i + y_i)`, with empty bins contributing nothing.
pub fn chi2_symmetric(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len(x, y)?;
    Ok(x.iter()
        .zip(y)
        .map(|(&a, &b)| if a + b > 0.0 { a * b / (a + b) } else { 0.0 })
        .sum())
}

/// `Σ (x_i − y_i)² / (x_i + y_i)`, with empty bins contributing nothing.
pub fn chi2_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len(x, y)?;
    Ok(x.iter()
        .zip(y)
        .map(|(&a, &b)| if a + b > 0.0 { (a - b) * (a - b) / (a + b) } else { 0.0 })
        .sum())
}

pub fn chi2_exponential(x: &[f64], y: &[f64], gamma: f64) -> Result<f64> {
    positive_gamma(gamma)?;
    Ok((-chi2_distance(x, y)? / gamma).exp())
}

/// Squared 2-Wasserstein distance between histograms on the bin-index line.
///
/// On the line the optimal plan is monotone, so the transport reduces to a
/// single sweep matching the two cumulative distributions.
pub fn wasserstein_sq(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len(x, y)?;
    if x.iter().chain(y).any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::Domain("histogram entries must be finite and nonnegative".into()));
    }
    let (mx, my) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    if (mx - my).abs() > MASS_TOLERANCE {
        return Err(Error::Domain(format!("mass mismatch: {mx} vs {my}")));
    }
    let n = x.len();
    let (mut i, mut j) = (0, 0);
    let (mut rx, mut ry) = (x.first().copied().unwrap_or(0.0), y.first().copied().unwrap_or(0.0));
    let mut cost = 0.0;
    while i < n && j < n {
        let moved = rx.min(ry);
        let d = i as f64 - j as f64;
        cost += moved * d * d;
        rx -= moved;
        ry -= moved;
        if rx <= 0.0 {
            i += 1;
            rx = x.get(i).copied().unwrap_or(0.0);
        }
        if ry <= 0.0 {
            j += 1;
            ry = y.get(j).copied().unwrap_or(0.0);
        }
    }
    Ok(cost)
}

pub fn wasserstein_kernel(x: &[f64], y: &[f64], gamma: f64) -> Result<f64> {
    positive_gamma(gamma)?;
    Ok((-wasserstein_sq(x, y)? / gamma).exp())
}

/// `exp(−‖y − y'‖² / γ)`.
pub fn gaussian_output(y: &[f64], z: &[f64], gamma: f64) -> Result<f64> {
    same_len(y, z)?;
    positive_gamma(gamma)?;
    let d2: f64 = y.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-d2 / gamma).exp())
}

pub fn gram_matrix<P: AsRef<[f64]>>(points: &[P], spec: &KernelSpec) -> Result<Mat<f64>> {
    spec.validate()?;
    if points.is_empty() {
        return Err(Error::Domain("Gram matrix needs at least one point".into()));
    }
    let n = points.len();
    let mut k = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = spec.eval(points[i].as_ref(), points[j].as_ref())?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// `K[i, j] = k(rows_i, cols_j)`.
pub fn cross_gram<P: AsRef<[f64]>, Q: AsRef<[f64]>>(rows: &[P], cols: &[Q], spec: &KernelSpec) -> Result<Mat<f64>> {
    spec.validate()?;
    let mut k = Mat::zeros(rows.len(), cols.len());
    for (i, r) in rows.iter().enumerate() {
        for (j, c) in cols.iter().enumerate() {
            k[(i, j)] = spec.eval(r.as_ref(), c.as_ref())?;
        }
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use faer::Side;
    use microlp::{ComparisonOp, OptimizationDirection, Problem};
    use proptest::prelude::*;

    fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0], len).prop_map(|mut v| {
            if v.iter().sum::<f64>() == 0.0 {
                v[0] = 1.0;
            }
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v
        })
    }

    /// Exact transport LP over the full `B × B` plan.
    fn lp_wasserstein(x: &[f64], y: &[f64]) -> f64 {
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

    #[test]
    fn chi2_symmetric_examples() {
        let x = [0.2, 0.3, 0.5];
        assert!((chi2_symmetric(&x, &x).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(chi2_symmetric(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let a = [0.5, 0.5, 0.0];
        let b = [0.0, 0.5, 0.5];
        assert!((chi2_symmetric(&a, &b).unwrap() - 0.25).abs() < 1e-15);
        assert!(chi2_symmetric(&a, &[1.0]).is_err());
    }

    #[test]
    fn chi2_exponential_examples() {
        let a = [0.5, 0.5, 0.0];
        let b = [0.0, 0.5, 0.5];
        assert_eq!(chi2_exponential(&a, &a, 1.0).unwrap(), 1.0);
        assert!((chi2_exponential(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap() - (-2.0f64).exp()).abs() < 1e-15);
        assert!((chi2_exponential(&a, &b, 1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!(chi2_exponential(&a, &b, 0.0).is_err());
    }

    #[test]
    fn wasserstein_examples() {
        let d1 = [1.0, 0.0, 0.0, 0.0];
        let d3 = [0.0, 0.0, 1.0, 0.0];
        assert_eq!(wasserstein_sq(&d1, &d1).unwrap(), 0.0);
        assert_eq!(wasserstein_sq(&d1, &d3).unwrap(), 4.0);
        assert!((wasserstein_kernel(&d1, &d3, 4.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!(matches!(wasserstein_sq(&[1.0, 0.0], &[0.5, 0.0]), Err(Error::Domain(_))));
        let mut prev = 0.0;
        for g in [0.1, 1.0, 10.0, 1e3, 1e6] {
            let k = wasserstein_kernel(&d1, &d3, g).unwrap();
            assert!(k > prev);
            prev = k;
        }
        assert!(prev > 0.9999);
    }

    #[test]
    fn gaussian_output_examples() {
        assert_eq!(gaussian_output(&[0.3, 0.1], &[0.3, 0.1], 2.0).unwrap(), 1.0);
        assert!((gaussian_output(&[1.0, 0.0], &[0.0, 1.0], 2.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        let (y, z) = ([0.2, 0.7], [0.5, 0.1]);
        let d2 = 0.09 + 0.36;
        let scaled = gaussian_output(&[0.4, 1.4], &[1.0, 0.2], 0.5).unwrap();
        assert!((scaled - (-4.0 * d2 / 0.5f64).exp()).abs() < 1e-14);
        assert!((gaussian_output(&y, &z, 0.5).unwrap() - (-d2 / 0.5f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn gram_examples() {
        let spec = KernelSpec::new(KernelKind::Wasserstein, 1.0).unwrap();
        let one = gram_matrix(&[vec![0.5, 0.5]], &spec).unwrap();
        assert_eq!(one[(0, 0)], 1.0);
        let pts = vec![vec![0.5, 0.5, 0.0], vec![0.0, 1.0, 0.0], vec![0.5, 0.5, 0.0]];
        let k = gram_matrix(&pts, &spec).unwrap();
        for j in 0..3 {
            assert_eq!(k[(0, j)], k[(2, j)]);
        }
        assert!(gram_matrix::<Vec<f64>>(&[], &spec).is_err());
    }

    #[test]
    fn random_wasserstein_gram_is_psd() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let pts: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                let v: Vec<f64> = (0..12).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
            .collect();
        for kind in [KernelKind::Wasserstein, KernelKind::Chi2Exponential] {
            let k = gram_matrix(&pts, &KernelSpec::new(kind, 0.5).unwrap()).unwrap();
            let eig = k.self_adjoint_eigen(Side::Lower).unwrap();
            let s = eig.S();
            let min = (0..10).map(|i| s[i]).fold(f64::INFINITY, f64::min);
            assert!(min >= -1e-8, "{kind:?}: {min}");
        }
    }

    #[test]
    fn kind_round_trips_through_names() {
        for k in [KernelKind::Chi2Symmetric, KernelKind::Chi2Exponential, KernelKind::Wasserstein, KernelKind::GaussianOutput] {
            assert_eq!(k.name().parse::<KernelKind>().unwrap(), k);
        }
        assert!("rbf".parse::<KernelKind>().is_err());
    }

    proptest! {
        #[test]
        fn sweep_matches_transport_lp((x, y) in (2usize..=8).prop_flat_map(|b| (simplex(b), simplex(b)))) {
            let sweep = wasserstein_sq(&x, &y).unwrap();
            let lp = lp_wasserstein(&x, &y);
            prop_assert!((sweep - lp).abs() <= 1e-8, "{} vs {}", sweep, lp);
        }

        #[test]
        fn kernels_are_symmetric((x, y) in (2usize..=12).prop_flat_map(|b| (simplex(b), simplex(b))), gamma in 0.01f64..10.0) {
            for kind in [KernelKind::Chi2Symmetric, KernelKind::Chi2Exponential, KernelKind::Wasserstein, KernelKind::GaussianOutput] {
                let spec = KernelSpec::new(kind, gamma).unwrap();
                prop_assert_eq!(spec.eval(&x, &y).unwrap(), spec.eval(&y, &x).unwrap());
            }
        }

        #[test]
        fn wasserstein_distance_satisfies_triangle_inequality(
            (x, y, z) in (2usize..=12).prop_flat_map(|b| (simplex(b), simplex(b), simplex(b)))
        ) {
            let d = |a: &[f64], b: &[f64]| wasserstein_sq(a, b).unwrap().sqrt();
            prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-10);
        }

        #[test]
        fn exponential_kernels_decrease_with_distance(
            (x, y, z) in (2usize..=12).prop_flat_map(|b| (simplex(b), simplex(b), simplex(b))),
            gamma in 0.01f64..10.0,
        ) {
            let (dy, dz) = (wasserstein_sq(&x, &y).unwrap(), wasserstein_sq(&x, &z).unwrap());
            let (ky, kz) = (wasserstein_kernel(&x, &y, gamma).unwrap(), wasserstein_kernel(&x, &z, gamma).unwrap());
            prop_assert!(dy > dz || ky >= kz);
            let (cy, cz) = (chi2_distance(&x, &y).unwrap(), chi2_distance(&x, &z).unwrap());
            let (ey, ez) = (chi2_exponential(&x, &y, gamma).unwrap(), chi2_exponential(&x, &z, gamma).unwrap());
            prop_assert!(cy > cz || ey >= ez);
        }
    }
}
