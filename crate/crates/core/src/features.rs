//! Resistance distance histograms (RDH) and auxiliary pattern features.
//!
//! A pattern becomes a weighted torus graph: an edge has weight 1 when both
//! endpoints lie on the same side of the mean concentration and a small
//! `epsilon_weight` otherwise. Resistances come from `K = (J + L_G)⁻¹`, where
//! `J` is the all-ones matrix, via `R_vw = K_vv + K_ww − 2 K_vw`.

use faer::linalg::solvers::{DenseSolveCore, Llt, Solve};
use faer::{Mat, Side};
use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TorusGrid;
use crate::simulate::{coefficient_of_variation, PatternField};

pub const DEFAULT_EPSILON_WEIGHT: f64 = 0.003;
/// Features use the first species unless told otherwise.
pub const DEFAULT_SPECIES: usize = 0;
pub const DEFAULT_BINS: usize = 12;
pub const R_MAX_QUANTILE: f64 = 0.99;
pub const CONCENTRATION_BINS: usize = 25;
/// Coefficient of variation below which a pattern counts as homogeneous.
pub const HOMOGENEOUS_CV: f64 = 1e-3;

/// Undirected graph with positive edge weights (conductances).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    nodes: usize,
    edges: Vec<(usize, usize, f64)>,
}

impl WeightedGraph {
    pub fn new(nodes: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::Domain("graph needs at least one node".into()));
        }
        for &(v, w, wt) in &edges {
            for x in [v, w] {
                if x >= nodes {
                    return Err(Error::Index { index: x, len: nodes });
                }
            }
            if !(wt > 0.0 && wt.is_finite()) {
                return Err(Error::Domain(format!("edge weight must be positive, got {wt}")));
            }
        }
        Ok(Self { nodes, edges })
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    /// Dense `J + L_G`.
    pub fn system_matrix(&self) -> Mat<f64> {
        let mut a = Mat::from_fn(self.nodes, self.nodes, |_, _| 1.0);
        for &(v, w, wt) in &self.edges {
            a[(v, v)] += wt;
            a[(w, w)] += wt;
            a[(v, w)] -= wt;
            a[(w, v)] -= wt;
        }
        a
    }

    fn factor(&self) -> Result<Llt<f64>> {
        Llt::new(self.system_matrix().as_ref(), Side::Lower)
            .map_err(|e| Error::Numerical(format!("Cholesky factorization failed: {e:?}")))
    }

    fn check_node(&self, v: usize) -> Result<()> {
        if v < self.nodes {
            Ok(())
        } else {
            Err(Error::Index { index: v, len: self.nodes })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternGraph {
    pub grid: TorusGrid,
    /// One weight per edge of [`TorusGrid::edges`], in that order.
    pub weights: Vec<f64>,
    pub epsilon_weight: f64,
    pub mean_concentration: f64,
    /// Whether each node lies at or above the mean.
    pub high: Vec<bool>,
}

impl PatternGraph {
    /// The same graph relabelled into a canonical frame of the torus.
    ///
    /// Among all translations, the eight square symmetries and both side polarities, picks the
    /// lexicographically smallest side field. Symmetric copies of a pattern therefore produce the
    /// identical graph, so histogram features do not depend on floating-point pivot order.
    pub fn canonical(&self) -> PatternGraph {
        let n = self.grid.side();
        let frame = |sym: usize, dr: usize, dc: usize, k: usize| {
            let (r, c) = ((k / n + dr) % n, (k % n + dc) % n);
            let (r, c) = match sym {
                0 => (r, c),
                1 => (c, n - 1 - r),
                2 => (n - 1 - r, n - 1 - c),
                3 => (n - 1 - c, r),
                4 => (c, r),
                5 => (r, n - 1 - c),
                6 => (n - 1 - c, n - 1 - r),
                _ => (n - 1 - r, c),
            };
            r * n + c
        };
        let mut best = self.high.clone();
        for sym in 0..8 {
            for dr in 0..n {
                for dc in 0..n {
                    for flip in [false, true] {
                        let key = |k: usize| self.high[frame(sym, dr, dc, k)] ^ flip;
                        let smaller = (0..best.len()).find(|&k| key(k) != best[k]).is_some_and(|k| !key(k));
                        if smaller {
                            best = (0..best.len()).map(key).collect();
                        }
                    }
                }
            }
        }
        PatternGraph {
            grid: self.grid,
            weights: side_weights(&self.grid, &best, self.epsilon_weight),
            epsilon_weight: self.epsilon_weight,
            mean_concentration: self.mean_concentration,
            high: best,
        }
    }

    pub fn to_weighted(&self) -> WeightedGraph {
        let edges = self
            .grid
            .edges()
            .zip(&self.weights)
            .map(|((v, w), &wt)| (v, w, wt))
            .collect();
        WeightedGraph {
            nodes: self.grid.len(),
            edges,
        }
    }
}

pub fn build_pattern_graph(pattern: &PatternField, species_index: usize, epsilon_weight: f64) -> Result<PatternGraph> {
    pattern_graph_from_values(pattern.grid, pattern.species(species_index)?, epsilon_weight)
}

pub fn pattern_graph_from_values(grid: TorusGrid, values: &[f64], epsilon_weight: f64) -> Result<PatternGraph> {
    if values.len() != grid.len() {
        return Err(Error::shape(grid.len(), values.len()));
    }
    if !(epsilon_weight > 0.0 && epsilon_weight.is_finite()) {
        return Err(Error::Domain(format!("epsilon_weight must be positive, got {epsilon_weight}")));
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("pattern contains non-finite values".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let high: Vec<bool> = values.iter().map(|&x| x >= mean).collect();
    Ok(PatternGraph {
        grid,
        weights: side_weights(&grid, &high, epsilon_weight),
        epsilon_weight,
        mean_concentration: mean,
        high,
    })
}

fn side_weights(grid: &TorusGrid, high: &[bool], epsilon_weight: f64) -> Vec<f64> {
    grid.edges().map(|(v, w)| if high[v] == high[w] { 1.0 } else { epsilon_weight }).collect()
}

/// Effective resistance between two nodes from a single solve with `e_v − e_w`.
pub fn resistance(graph: &WeightedGraph, v: usize, w: usize) -> Result<f64> {
    graph.check_node(v)?;
    graph.check_node(w)?;
    if v == w {
        return Ok(0.0);
    }
    // Ground `w`: the reduced Laplacian is SPD on a connected graph and avoids the rank-one fill of J.
    let n = graph.nodes - 1;
    let slot = |u: usize| if u < w { u } else { u - 1 };
    let mut a = Mat::<f64>::zeros(n, n);
    for &(p, q, wt) in &graph.edges {
        if p != w {
            a[(slot(p), slot(p))] += wt;
        }
        if q != w {
            a[(slot(q), slot(q))] += wt;
        }
        if p != w && q != w {
            a[(slot(p), slot(q))] -= wt;
            a[(slot(q), slot(p))] -= wt;
        }
    }
    let llt = Llt::new(a.as_ref(), Side::Lower)
        .map_err(|e| Error::Numerical(format!("Cholesky factorization failed: {e:?}")))?;
    let rhs = Mat::from_fn(n, 1, |i, _| if i == slot(v) { 1.0 } else { 0.0 });
    let mut z = llt.solve(&rhs);
    for _ in 0..2 {
        let resid = &rhs - &a * &z;
        z += llt.solve(&resid);
    }
    let r = z[(slot(v), 0)];
    if !r.is_finite() {
        return Err(Error::Numerical("non-finite resistance".into()));
    }
    Ok(r.max(0.0))
}

/// The full Gram matrix `K = (J + L_G)⁻¹`, from which any resistance follows.
#[derive(Debug, Clone)]
pub struct ResistanceResult {
    gram: Mat<f64>,
}

impl ResistanceResult {
    pub fn compute(graph: &WeightedGraph) -> Result<Self> {
        let gram = graph.factor()?.inverse();
        if (0..gram.ncols()).any(|j| gram.col(j).iter().any(|x| !x.is_finite())) {
            return Err(Error::Numerical("non-finite entries in the Gram matrix".into()));
        }
        Ok(Self { gram })
    }

    pub fn node_count(&self) -> usize {
        self.gram.nrows()
    }

    pub fn gram(&self) -> &Mat<f64> {
        &self.gram
    }

    pub fn gram_diag(&self) -> Vec<f64> {
        (0..self.node_count()).map(|v| self.gram[(v, v)]).collect()
    }

    pub fn column(&self, v: usize) -> Result<Vec<f64>> {
        self.check(v)?;
        Ok(self.gram.col(v).iter().copied().collect())
    }

    /// `R_vw`; exactly zero for `v = w` and clamped at zero against roundoff.
    pub fn get(&self, v: usize, w: usize) -> f64 {
        if v == w {
            return 0.0;
        }
        let k = &self.gram;
        (k[(v, v)] + k[(w, w)] - 2.0 * k[(v, w)]).max(0.0)
    }

    pub fn resistance(&self, v: usize, w: usize) -> Result<f64> {
        self.check(v)?;
        self.check(w)?;
        Ok(self.get(v, w))
    }

    /// Resistances from `v` to every node.
    pub fn resistance_row(&self, v: usize) -> Result<Vec<f64>> {
        self.check(v)?;
        Ok((0..self.node_count()).map(|w| self.get(v, w)).collect())
    }

    fn check(&self, v: usize) -> Result<()> {
        if v < self.node_count() {
            Ok(())
        } else {
            Err(Error::Index { index: v, len: self.node_count() })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdhConfig {
    pub radius: f64,
    pub spacing: usize,
    pub bins: usize,
    pub r_max: f64,
}

impl RdhConfig {
    pub fn new(radius: f64, bins: usize, r_max: f64) -> Result<Self> {
        let cfg = Self { radius, spacing: 1, bins, r_max };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius >= 1.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!("radius must be at least 1, got {}", self.radius)));
        }
        if self.spacing == 0 {
            return Err(Error::Config("spacing must be positive".into()));
        }
        if self.bins < 2 {
            return Err(Error::Config(format!("need at least 2 bins, got {}", self.bins)));
        }
        if !(self.r_max > 0.0 && self.r_max.is_finite()) {
            return Err(Error::Config(format!("r_max must be positive, got {}", self.r_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rdh {
    pub values: Vec<f64>,
    pub config: RdhConfig,
}

/// Node offsets `(dr, dc)` modulo the side whose toroidal length is at most `radius`.
/// Each target node appears once, including the zero offset.
pub fn offsets_within(grid: &TorusGrid, radius: f64) -> Vec<(usize, usize)> {
    let n = grid.side();
    let wrap = |d: usize| d.min(n - d);
    let r2 = radius * radius;
    let mut out = Vec::new();
    for dr in 0..n {
        for dc in 0..n {
            let (a, b) = (wrap(dr), wrap(dc));
            if ((a * a + b * b) as f64) <= r2 {
                out.push((dr, dc));
            }
        }
    }
    out
}

/// Source nodes on the `spacing`-subsampled lattice.
fn sources(grid: &TorusGrid, spacing: usize) -> impl Iterator<Item = usize> + '_ {
    let n = grid.side();
    (0..n)
        .step_by(spacing)
        .flat_map(move |r| (0..n).step_by(spacing).map(move |c| grid.node(r, c)))
}

/// All `R_vw` with `v` a source node and `w` within `radius` of it.
pub fn collect_resistances(res: &ResistanceResult, grid: &TorusGrid, radius: f64, spacing: usize) -> Result<Vec<f64>> {
    if res.node_count() != grid.len() {
        return Err(Error::shape(grid.len(), res.node_count()));
    }
    if spacing == 0 {
        return Err(Error::Config("spacing must be positive".into()));
    }
    let n = grid.side();
    let offsets = offsets_within(grid, radius);
    let mut out = Vec::new();
    for v in sources(grid, spacing) {
        let (r, c) = grid.coords(v);
        for &(dr, dc) in &offsets {
            out.push(res.get(v, grid.node((r + dr) % n, (c + dc) % n)));
        }
    }
    Ok(out)
}

/// Normalized histogram on `[0, r_max)`; values at or beyond `r_max` are dropped.
pub fn rdh_from_values(values: &[f64], cfg: &RdhConfig) -> Result<Rdh> {
    cfg.validate()?;
    let mut counts = vec![0u64; cfg.bins];
    let scale = cfg.bins as f64 / cfg.r_max;
    for &x in values {
        if x.is_nan() {
            return Err(Error::Numerical("NaN resistance value".into()));
        }
        if x >= cfg.r_max {
            continue;
        }
        let k = ((x.max(0.0) * scale) as usize).min(cfg.bins - 1);
        counts[k] += 1;
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::DegenerateFeature(format!(
            "all {} resistance values lie at or beyond r_max = {}",
            values.len(),
            cfg.r_max
        )));
    }
    Ok(Rdh {
        values: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        config: *cfg,
    })
}

/// Histogram of `graph`, computed in its canonical frame.
pub fn compute_rdh(graph: &PatternGraph, cfg: &RdhConfig) -> Result<Rdh> {
    cfg.validate()?;
    let res = ResistanceResult::compute(&graph.canonical().to_weighted())?;
    let values = collect_resistances(&res, &graph.grid, cfg.radius, cfg.spacing)?;
    rdh_from_values(&values, cfg)
}

/// Linear-interpolation empirical quantile (`(n−1)p` positions). Reorders `values`.
pub fn quantile(values: &mut [f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("quantile level {p} outside [0, 1]")));
    }
    if values.iter().any(|x| x.is_nan()) {
        return Err(Error::Numerical("NaN in quantile sample".into()));
    }
    let pos = (values.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut lo_val, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || upper.is_empty() {
        return Ok(lo_val);
    }
    let hi_val = upper.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(lo_val + frac * (hi_val - lo_val))
}

/// Maximum over patterns of the per-pattern 0.99 quantile.
pub fn r_max_from_dataset(samples: &[Vec<f64>]) -> Result<f64> {
    let quantiles = samples
        .iter()
        .map(|s| quantile(&mut s.clone(), R_MAX_QUANTILE))
        .collect::<Result<Vec<_>>>()?;
    r_max_from_quantiles(&quantiles)
}

pub fn r_max_from_quantiles(quantiles: &[f64]) -> Result<f64> {
    let r = quantiles.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if quantiles.is_empty() {
        return Err(Error::Domain("r_max needs at least one pattern".into()));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::DegenerateFeature(format!("r_max must be positive, got {r}")));
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtraFeatures {
    pub c_m: f64,
    pub n_c: usize,
}

pub fn extra_features(pattern: &PatternField, species_index: usize) -> Result<ExtraFeatures> {
    Ok(ExtraFeatures {
        c_m: maximal_concentration(pattern, species_index)?,
        n_c: connected_components_high(pattern, species_index)?,
    })
}

pub fn maximal_concentration(pattern: &PatternField, species_index: usize) -> Result<f64> {
    maximal_concentration_of(pattern.species(species_index)?)
}

/// Center of the right-most nonempty local maximum of a 25-bin histogram on `[min, max]`.
pub fn maximal_concentration_of(values: &[f64]) -> Result<f64> {
    if values.is_empty() || values.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("need a nonempty finite field".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(lo);
    }
    let nb = CONCENTRATION_BINS;
    let width = (hi - lo) / nb as f64;
    let mut counts = vec![0usize; nb];
    for &x in values {
        counts[(((x - lo) / width) as usize).min(nb - 1)] += 1;
    }
    let peak = (0..nb)
        .rev()
        .find(|&k| {
            counts[k] > 0
                && (k == 0 || counts[k] >= counts[k - 1])
                && (k + 1 == nb || counts[k] >= counts[k + 1])
        })
        .expect("the largest bin is a local maximum");
    Ok(lo + (peak as f64 + 0.5) * width)
}

pub fn connected_components_high(pattern: &PatternField, species_index: usize) -> Result<usize> {
    connected_components_high_of(&pattern.grid, pattern.species(species_index)?)
}

/// Components of the subgraph induced on nodes with `u_v ≥ ū`.
pub fn connected_components_high_of(grid: &TorusGrid, values: &[f64]) -> Result<usize> {
    if values.len() != grid.len() {
        return Err(Error::shape(grid.len(), values.len()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let high: Vec<bool> = values.iter().map(|&x| x >= mean).collect();
    let mut uf = UnionFind::<usize>::new(grid.len());
    for (v, w) in grid.edges() {
        if high[v] && high[w] {
            uf.union(v, w);
        }
    }
    Ok((0..grid.len()).filter(|&v| high[v] && uf.find(v) == v).count())
}

/// Rejects spatially homogeneous patterns, which carry no shape information.
pub fn check_nondegenerate(pattern: &PatternField, species_index: usize) -> Result<()> {
    let cv = pattern.coefficient_of_variation(species_index)?;
    if cv.is_finite() && cv >= HOMOGENEOUS_CV {
        Ok(())
    } else {
        Err(Error::DegenerateFeature(format!(
            "pattern is spatially homogeneous (coefficient of variation {cv:e})"
        )))
    }
}

pub fn is_homogeneous(values: &[f64]) -> bool {
    !(coefficient_of_variation(values) >= HOMOGENEOUS_CV)
}
