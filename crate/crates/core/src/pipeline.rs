//! Dataset generation, learning protocol, clustering and embedding.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use faer::Mat;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    collect_resistances, connected_components_high_of, is_homogeneous, maximal_concentration_of, offsets_within,
    pattern_graph_from_values, quantile, r_max_from_quantiles, rdh_from_values, RdhConfig, ResistanceResult,
    DEFAULT_BINS, DEFAULT_EPSILON_WEIGHT, DEFAULT_SPECIES, R_MAX_QUANTILE,
};
use crate::formats::{
    read_features, read_manifest, write_features, write_manifest, FeatureRow, FeatureSpec, ManifestRow, ModelMeta,
    Predictor, SavedModel,
};
use crate::grid::TorusGrid;
use crate::kernels::{cross_gram, gram_matrix, wasserstein_sq, KernelKind, KernelSpec};
use crate::model::{gm_stability, GmParams};
use crate::neural::{ffnn_architecture_search, Split, TrainSchedule, DEFAULT_ARCHITECTURES};
use crate::ovk::{ovk_predict, ovk_train_gram, GmresOptions, DEFAULT_EPS_REG};
use crate::simulate::{simulate_gm, PatternField, SimConfig};
use crate::svr::{svr_solve, SvrModel, SvrOptions};

/// Parameters a model can predict, in output order for `all`.
pub const TARGET_NAMES: [&str; 4] = ["a", "b", "c", "delta"];
/// Rejection sampling gives up after this many draws per requested pattern.
pub const DRAW_CAP_FACTOR: usize = 50;
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const META_FILE: &str = "dataset.toml";
pub const PATTERN_DIR: &str = "patterns";
/// Tube half-width of the SVR loss, in normalized target units.
pub const DEFAULT_EPSILON_TUBE: f64 = 0.01;
/// Datasets of at most this many patterns are split into chunks when averaging.
pub const AVERAGING_LIMIT: usize = 500;

/// A sampled parameter: fixed, or uniform on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamRange {
    Fixed(f64),
    Uniform([f64; 2]),
}

impl ParamRange {
    fn validate(&self, name: &str) -> Result<()> {
        match *self {
            ParamRange::Fixed(v) if v.is_finite() => Ok(()),
            ParamRange::Uniform([lo, hi]) if lo.is_finite() && hi.is_finite() && lo < hi => Ok(()),
            _ => Err(Error::Config(format!("range for {name} must be finite with lower < upper"))),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            ParamRange::Fixed(v) => v,
            ParamRange::Uniform([lo, hi]) => rng.gen_range(lo..=hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingPlan {
    pub a: ParamRange,
    pub b: ParamRange,
    pub c: ParamRange,
    pub delta: ParamRange,
    pub s: ParamRange,
    pub count: usize,
    pub grid_side: usize,
    pub seed: u64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self::single_parameter(100, 64, 0)
    }
}

impl SamplingPlan {
    /// `c` uniform on `[0, 1.15]` with `a = 0.02, b = 1, δ = 100, s = 0.25`.
    pub fn single_parameter(count: usize, grid_side: usize, seed: u64) -> Self {
        Self {
            a: ParamRange::Fixed(0.02),
            b: ParamRange::Fixed(1.0),
            c: ParamRange::Uniform([0.0, 1.15]),
            delta: ParamRange::Fixed(100.0),
            s: ParamRange::Fixed(0.25),
            count,
            grid_side,
            seed,
        }
    }

    /// `a, b, c, δ` uniform on their ranges with `s = 0.4`.
    pub fn four_parameter(count: usize, grid_side: usize, seed: u64) -> Self {
        Self {
            a: ParamRange::Uniform([0.01, 0.7]),
            b: ParamRange::Uniform([0.4, 2.0]),
            c: ParamRange::Uniform([0.02, 7.0]),
            delta: ParamRange::Uniform([20.0, 200.0]),
            s: ParamRange::Fixed(0.4),
            count,
            grid_side,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("a", &self.a), ("b", &self.b), ("c", &self.c), ("delta", &self.delta), ("s", &self.s)] {
            r.validate(name)?;
        }
        TorusGrid::new(self.grid_side)?;
        Ok(())
    }
}

/// A parameter set queued for simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub id: usize,
    pub params: GmParams,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub candidates: Vec<Candidate>,
    pub draws: usize,
}

impl SampleOutcome {
    pub fn acceptance_rate(&self) -> f64 {
        if self.draws == 0 {
            1.0
        } else {
            self.candidates.len() as f64 / self.draws as f64
        }
    }
}

/// Draws until `count` parameter sets with a Turing instability are found
/// or the draw cap is hit.
pub fn sample_parameters(plan: &SamplingPlan) -> Result<SampleOutcome> {
    plan.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let cap = plan.count.saturating_mul(DRAW_CAP_FACTOR);
    let mut candidates = Vec::with_capacity(plan.count);
    let mut draws = 0;
    while candidates.len() < plan.count && draws < cap {
        draws += 1;
        let params = GmParams {
            a: plan.a.sample(&mut rng),
            b: plan.b.sample(&mut rng),
            c: plan.c.sample(&mut rng),
            delta: plan.delta.sample(&mut rng),
            s: plan.s.sample(&mut rng),
        };
        let seed = rng.next_u64();
        if params.validate().is_err() {
            continue;
        }
        if matches!(gm_stability(&params), Ok(r) if r.turing) {
            candidates.push(Candidate {
                id: candidates.len(),
                params,
                seed,
            });
        }
    }
    if candidates.len() < plan.count {
        warn!("only {} of {} parameter sets after {draws} draws", candidates.len(), plan.count);
    }
    Ok(SampleOutcome { candidates, draws })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureOptions {
    pub radii: Vec<f64>,
    pub bins: usize,
    pub epsilon_weight: f64,
    pub species: usize,
    pub spacing: usize,
    pub extras: bool,
    /// Resistance samples kept in memory between the two passes; beyond this
    /// the resistance matrices are recomputed.
    pub cache_bytes: usize,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            radii: vec![8.0],
            bins: DEFAULT_BINS,
            epsilon_weight: DEFAULT_EPSILON_WEIGHT,
            species: DEFAULT_SPECIES,
            spacing: 1,
            extras: false,
            cache_bytes: 1 << 30,
        }
    }
}

impl FeatureOptions {
    pub fn validate(&self) -> Result<()> {
        if self.radii.is_empty() {
            return Err(Error::Config("at least one radius is required".into()));
        }
        for &r in &self.radii {
            RdhConfig::new(r, self.bins, 1.0)?;
        }
        if !(self.epsilon_weight > 0.0 && self.epsilon_weight <= 1.0) {
            return Err(Error::Config("epsilon_weight must lie in (0, 1]".into()));
        }
        if self.spacing == 0 {
            return Err(Error::Config("spacing must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusScale {
    pub radius: f64,
    pub r_max: f64,
}

/// Dataset-wide settings stored next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub grid_side: usize,
    pub bins: usize,
    pub epsilon_weight: f64,
    pub species: usize,
    pub spacing: usize,
    pub extras: bool,
    pub seed: u64,
    pub draws: usize,
    pub scales: Vec<RadiusScale>,
    /// Ids simulated but left without features (homogeneous outcome).
    pub excluded: Vec<usize>,
}

impl DatasetMeta {
    pub fn r_max(&self, radius: f64) -> Result<f64> {
        self.scales
            .iter()
            .find(|s| s.radius == radius)
            .map(|s| s.r_max)
            .ok_or_else(|| Error::Config(format!("dataset has no features for radius {radius}")))
    }

    pub fn feature_spec(&self, radius: f64, extras: bool) -> Result<FeatureSpec> {
        Ok(FeatureSpec {
            radius,
            bins: self.bins,
            r_max: self.r_max(radius)?,
            epsilon_weight: self.epsilon_weight,
            species: self.species,
            extras,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub manifest: Vec<ManifestRow>,
    pub features: Vec<FeatureRow>,
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_manifest(&dir.join(MANIFEST_FILE), &self.manifest)?;
        write_features(&dir.join(FEATURES_FILE), self.meta.bins, &self.features)?;
        let text = toml::to_string(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(META_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(META_FILE))?;
        let meta: DatasetMeta = toml::from_str(&text).map_err(|e| Error::Format(format!("{META_FILE}: {e}")))?;
        let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
        let features = read_features(&dir.join(FEATURES_FILE))?;
        if features.iter().any(|f| f.rdh.len() != meta.bins) {
            return Err(Error::Format("feature rows disagree with the dataset bin count".into()));
        }
        Ok(Self { meta, manifest, features })
    }

    /// Feature rows at one radius, in manifest order.
    pub fn rows_at(&self, radius: f64) -> Vec<&FeatureRow> {
        self.features.iter().filter(|f| f.radius == radius).collect()
    }

    pub fn params_of(&self, id: usize) -> Option<GmParams> {
        self.manifest.iter().find(|r| r.id == id).map(ManifestRow::params)
    }
}

pub fn pattern_path(id: usize) -> String {
    format!("{PATTERN_DIR}/{id:06}.tpat")
}

struct Simulated {
    row: ManifestRow,
    field: Option<Vec<f64>>,
    extras: Option<(f64, usize)>,
    quantiles: Vec<f64>,
    cached: Option<Vec<Vec<f64>>>,
}

fn resistance_samples(grid: &TorusGrid, field: &[f64], opts: &FeatureOptions) -> Result<Vec<Vec<f64>>> {
    let graph = pattern_graph_from_values(*grid, field, opts.epsilon_weight)?.canonical();
    let res = ResistanceResult::compute(&graph.to_weighted())?;
    opts.radii.iter().map(|&r| collect_resistances(&res, grid, r, opts.spacing)).collect()
}

fn simulate_candidate(
    cand: &Candidate,
    grid: TorusGrid,
    sim: &SimConfig,
    opts: &FeatureOptions,
    cache: bool,
    out: Option<&Path>,
) -> Result<Option<Simulated>> {
    let pattern = match simulate_gm(&cand.params, grid, &sim.clone().with_seed(cand.seed)) {
        Ok(p) => p,
        Err(e @ (Error::SimulationFailure { .. } | Error::Numerical(_))) => {
            warn!("pattern {} skipped: {e}", cand.id);
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let path = pattern_path(cand.id);
    if let Some(dir) = out {
        crate::formats::write_pattern(&dir.join(&path), &pattern)?;
    }
    let p = cand.params;
    let row = ManifestRow {
        id: cand.id,
        a: p.a,
        b: p.b,
        c: p.c,
        delta: p.delta,
        s: p.s,
        seed: cand.seed,
        converged: pattern.converged,
        path,
    };
    let field = pattern.species(opts.species)?;
    if is_homogeneous(field) {
        warn!("pattern {} is homogeneous; excluded from features", cand.id);
        return Ok(Some(Simulated {
            row,
            field: None,
            extras: None,
            quantiles: vec![],
            cached: None,
        }));
    }
    let extras = if opts.extras {
        Some((maximal_concentration_of(field)?, connected_components_high_of(&grid, field)?))
    } else {
        None
    };
    let mut samples = resistance_samples(&grid, field, opts)?;
    let quantiles = samples.iter_mut().map(|s| quantile(s, R_MAX_QUANTILE)).collect::<Result<Vec<_>>>()?;
    Ok(Some(Simulated {
        row,
        field: Some(field.to_vec()),
        extras,
        quantiles,
        cached: cache.then_some(samples),
    }))
}

/// Simulates the candidates, fixes `r_max` per radius from the whole set and
/// computes the histograms. Pattern files and tables go to `out` when given.
pub fn build_dataset(
    candidates: &[Candidate],
    grid_side: usize,
    sim: &SimConfig,
    opts: &FeatureOptions,
    seed: u64,
    draws: usize,
    out: Option<&Path>,
) -> Result<Dataset> {
    sim.validate()?;
    opts.validate()?;
    let grid = TorusGrid::new(grid_side)?;
    let sources = grid_side.div_ceil(opts.spacing).pow(2);
    let per_pattern: usize = opts.radii.iter().map(|&r| sources * offsets_within(&grid, r).len()).sum();
    let cache = candidates.len().saturating_mul(per_pattern).saturating_mul(8) <= opts.cache_bytes;

    let simulated: Vec<Simulated> = candidates
        .par_iter()
        .map(|c| {
            let s = simulate_candidate(c, grid, sim, opts, cache, out);
            if let Ok(Some(s)) = &s {
                info!("pattern {} simulated (converged = {})", s.row.id, s.row.converged);
            }
            s
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let featured: Vec<&Simulated> = simulated.iter().filter(|s| s.field.is_some()).collect();
    let mut scales = Vec::with_capacity(opts.radii.len());
    for (k, &radius) in opts.radii.iter().enumerate() {
        let r_max = if featured.is_empty() {
            f64::NAN
        } else {
            r_max_from_quantiles(&featured.iter().map(|s| s.quantiles[k]).collect::<Vec<_>>())?
        };
        scales.push(RadiusScale { radius, r_max });
    }

    let histograms: Vec<Result<Vec<FeatureRow>>> = featured
        .par_iter()
        .map(|s| {
            let fresh;
            let samples = match &s.cached {
                Some(c) => c,
                None => {
                    fresh = resistance_samples(&grid, s.field.as_deref().expect("featured"), opts)?;
                    &fresh
                }
            };
            scales
                .iter()
                .zip(samples)
                .map(|(scale, values)| {
                    let mut cfg = RdhConfig::new(scale.radius, opts.bins, scale.r_max)?;
                    cfg.spacing = opts.spacing;
                    Ok(FeatureRow {
                        id: s.row.id,
                        radius: scale.radius,
                        rdh: rdh_from_values(values, &cfg)?.values,
                        c_m: s.extras.map(|e| e.0),
                        n_c: s.extras.map(|e| e.1),
                    })
                })
                .collect()
        })
        .collect();

    let mut features = Vec::new();
    let mut excluded: Vec<usize> = simulated.iter().filter(|s| s.field.is_none()).map(|s| s.row.id).collect();
    for (s, rows) in featured.iter().zip(histograms) {
        match rows {
            Ok(rows) => features.extend(rows),
            Err(Error::DegenerateFeature(msg)) => {
                warn!("pattern {} excluded: {msg}", s.row.id);
                excluded.push(s.row.id);
            }
            Err(e) => return Err(e),
        }
    }
    excluded.sort_unstable();
    features.sort_by(|x, y| x.radius.total_cmp(&y.radius).then(x.id.cmp(&y.id)));

    let dataset = Dataset {
        meta: DatasetMeta {
            grid_side,
            bins: opts.bins,
            epsilon_weight: opts.epsilon_weight,
            species: opts.species,
            spacing: opts.spacing,
            extras: opts.extras,
            seed,
            draws,
            scales,
            excluded,
        },
        manifest: simulated.into_iter().map(|s| s.row).collect(),
        features,
    };
    if let Some(dir) = out {
        dataset.save(dir)?;
    }
    Ok(dataset)
}

pub fn generate_dataset(plan: &SamplingPlan, sim: &SimConfig, opts: &FeatureOptions, out: Option<&Path>) -> Result<Dataset> {
    let sampled = sample_parameters(plan)?;
    info!(
        "{} parameter sets accepted from {} draws",
        sampled.candidates.len(),
        sampled.draws
    );
    build_dataset(&sampled.candidates, plan.grid_side, sim, opts, plan.seed, sampled.draws, out)
}

/// Which parameters to predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    One(&'static str),
    All,
}

impl Target {
    /// Inverse of [`Target::names`].
    pub fn from_names(names: &[String]) -> Result<Self> {
        match names {
            [one] => one.parse(),
            all if all.iter().map(String::as_str).eq(TARGET_NAMES) => Ok(Target::All),
            _ => Err(Error::Format(format!("unsupported target list {names:?}"))),
        }
    }

    pub fn names(&self) -> Vec<String> {
        match self {
            Target::One(n) => vec![n.to_string()],
            Target::All => TARGET_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Target::All);
        }
        TARGET_NAMES
            .iter()
            .find(|&&n| n == s)
            .map(|&n| Target::One(n))
            .ok_or_else(|| Error::Config(format!("unknown target '{s}' (expected a, b, c, delta or all)")))
    }
}

/// Inputs and raw targets for one radius, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningData {
    pub ids: Vec<usize>,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub target_names: Vec<String>,
    pub features: FeatureSpec,
    /// Divisors applied to the appended `c_m` and `n_c` columns.
    pub extra_scale: Vec<f64>,
}

impl LearningData {
    pub fn from_dataset(ds: &Dataset, radius: f64, target: &Target, extras: bool) -> Result<Self> {
        let features = ds.meta.feature_spec(radius, extras)?;
        let target_names = target.names();
        let rows = ds.rows_at(radius);
        if extras && rows.iter().any(|r| r.c_m.is_none() || r.n_c.is_none()) {
            return Err(Error::Config("dataset was generated without c_m and n_c".into()));
        }
        let extra_scale = if extras {
            let cm = rows.iter().filter_map(|r| r.c_m).map(f64::abs).fold(0.0, f64::max);
            let nc = rows.iter().filter_map(|r| r.n_c).max().unwrap_or(0) as f64;
            [cm, nc].iter().map(|&m| if m > 0.0 { m } else { 1.0 }).collect()
        } else {
            vec![]
        };
        let by_id: BTreeMap<usize, &ManifestRow> = ds.manifest.iter().map(|r| (r.id, r)).collect();
        let mut data = Self {
            ids: vec![],
            inputs: vec![],
            targets: vec![],
            target_names,
            features,
            extra_scale,
        };
        for row in rows {
            let m = by_id
                .get(&row.id)
                .ok_or_else(|| Error::Format(format!("feature row {} has no manifest entry", row.id)))?;
            let p = m.params();
            data.ids.push(row.id);
            data.inputs.push(assemble_input(&row.rdh, row.c_m, row.n_c, &data.extra_scale)?);
            data.targets
                .push(data.target_names.iter().map(|n| p.get(n).expect("known target")).collect());
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
            target_names: self.target_names.clone(),
            features: self.features.clone(),
            extra_scale: self.extra_scale.clone(),
        }
    }
}

/// Histogram, optionally followed by the scaled `c_m` and `n_c`.
pub fn assemble_input(rdh: &[f64], c_m: Option<f64>, n_c: Option<usize>, extra_scale: &[f64]) -> Result<Vec<f64>> {
    let mut x = rdh.to_vec();
    if !extra_scale.is_empty() {
        match (c_m, n_c, extra_scale) {
            (Some(cm), Some(nc), [s_cm, s_nc]) => {
                x.push(cm / s_cm);
                x.push(nc as f64 / s_nc);
            }
            _ => return Err(Error::Config("c_m and n_c are required by this model".into())),
        }
    }
    Ok(x)
}

/// Per-target division by the dataset maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub maxima: Vec<f64>,
}

impl Normalizer {
    pub fn fit(targets: &[Vec<f64>]) -> Result<Self> {
        let d = targets.first().map(Vec::len).ok_or_else(|| Error::Precondition("no targets to normalize".into()))?;
        let mut maxima = vec![f64::NEG_INFINITY; d];
        for y in targets {
            if y.len() != d {
                return Err(Error::shape(d, y.len()));
            }
            for (m, &v) in maxima.iter_mut().zip(y) {
                *m = m.max(v);
            }
        }
        if maxima.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::Domain("every target needs a positive maximum".into()));
        }
        Ok(Self { maxima })
    }

    pub fn normalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.maxima).map(|(v, m)| v / m).collect()
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.maxima).map(|(v, m)| v * m).collect()
    }

    pub fn normalize_all(&self, ys: &[Vec<f64>]) -> Vec<Vec<f64>> {
        ys.iter().map(|y| self.normalize(y)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random permutation cut 60/20/20 (sizes rounded).
pub fn split_dataset(n: usize, seed: u64) -> Result<SplitAssignment> {
    if n < 5 {
        return Err(Error::Precondition(format!("need at least 5 records to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (0.6 * n as f64).round() as usize;
    let n_val = (0.2 * n as f64).round() as usize;
    let test = idx.split_off(n_train + n_val);
    let validation = idx.split_off(n_train);
    Ok(SplitAssignment { train: idx, validation, test })
}

/// RMSE over all entries divided by the mean target.
pub fn nrmse(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::shape(targets.len(), predictions.len()));
    }
    let mut sq = 0.0;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, y) in predictions.iter().zip(targets) {
        if p.len() != y.len() {
            return Err(Error::shape(y.len(), p.len()));
        }
        for (a, b) in p.iter().zip(y) {
            if *b < 0.0 {
                return Err(Error::Domain("targets must be nonnegative".into()));
            }
            sq += (a - b) * (a - b);
            sum += b;
            count += 1;
        }
    }
    if count == 0 || sum <= 0.0 {
        return Err(Error::Domain("target mean must be positive".into()));
    }
    Ok((sq / count as f64).sqrt() / (sum / count as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Svr,
    Ovk,
    Ffnn,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svr" => Ok(Method::Svr),
            "ovk" => Ok(Method::Ovk),
            "ffnn" => Ok(Method::Ffnn),
            _ => Err(Error::Config(format!("unknown method '{s}' (expected svr, ovk or ffnn)"))),
        }
    }
}

fn powers(base: f64, lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|k| base.powi(k)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub method: Method,
    pub kernel: KernelKind,
    pub gammas: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Output-kernel widths searched jointly for OVK.
    pub output_gammas: Vec<f64>,
    pub epsilon_tube: f64,
    pub eps_reg: f64,
    /// Second, finer grid around the winner.
    pub refine: bool,
    pub architectures: Vec<Vec<usize>>,
    pub max_steps: Option<usize>,
    pub patience: Option<usize>,
    pub learning_rate: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            method: Method::Svr,
            kernel: KernelKind::Wasserstein,
            gammas: powers(2.0, -6, 6),
            lambdas: powers(10.0, -6, 1),
            output_gammas: powers(2.0, -6, 6),
            epsilon_tube: DEFAULT_EPSILON_TUBE,
            eps_reg: DEFAULT_EPS_REG,
            refine: false,
            architectures: DEFAULT_ARCHITECTURES.iter().map(|a| a.to_vec()).collect(),
            max_steps: None,
            patience: None,
            learning_rate: 1e-3,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: &[f64], what: &str| {
            if v.is_empty() || v.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                Err(Error::Config(format!("{what} must be a nonempty list of positive values")))
            } else {
                Ok(())
            }
        };
        match self.method {
            Method::Svr => {
                positive(&self.lambdas, "lambdas")?;
                if self.kernel.uses_gamma() {
                    positive(&self.gammas, "gammas")?;
                }
                if self.kernel == KernelKind::GaussianOutput {
                    return Err(Error::Config("gaussian_output is not an input kernel".into()));
                }
                if !(self.epsilon_tube >= 0.0 && self.epsilon_tube.is_finite()) {
                    return Err(Error::Config("epsilon_tube must be nonnegative".into()));
                }
            }
            Method::Ovk => {
                positive(&self.lambdas, "lambdas")?;
                positive(&self.output_gammas, "output_gammas")?;
                if self.kernel.uses_gamma() {
                    positive(&self.gammas, "gammas")?;
                }
                if self.kernel == KernelKind::GaussianOutput {
                    return Err(Error::Config("gaussian_output is not an input kernel".into()));
                }
            }
            Method::Ffnn => {
                if self.architectures.is_empty() {
                    return Err(Error::Config("architectures must be nonempty".into()));
                }
            }
        }
        Ok(())
    }

    fn input_gammas(&self) -> Vec<f64> {
        if self.kernel.uses_gamma() {
            self.gammas.clone()
        } else {
            vec![1.0]
        }
    }
}

/// One evaluated hyperparameter combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub gamma: f64,
    pub output_gamma: Option<f64>,
    pub lambda: f64,
    pub validation_nrmse: f64,
}

/// Lowest validation error, then smallest λ, then smallest γ.
fn better(a: &GridPoint, b: &GridPoint) -> bool {
    a.validation_nrmse
        .total_cmp(&b.validation_nrmse)
        .then(a.lambda.total_cmp(&b.lambda))
        .then(a.gamma.total_cmp(&b.gamma))
        .then(a.output_gamma.unwrap_or(0.0).total_cmp(&b.output_gamma.unwrap_or(0.0)))
        .is_lt()
}

fn best_point(points: &[GridPoint]) -> Option<GridPoint> {
    points.iter().fold(None, |best: Option<GridPoint>, p| match best {
        Some(b) if !better(p, &b) => Some(b),
        _ => Some(*p),
    })
}

fn refined(values: &[f64], winner: f64, base: f64) -> Vec<f64> {
    if values.len() <= 1 {
        return vec![winner];
    }
    [-0.5, -0.25, 0.0, 0.25, 0.5].iter().map(|e| winner * base.powf(*e)).collect()
}

fn column(ys: &[Vec<f64>], j: usize) -> Vec<f64> {
    ys.iter().map(|y| y[j]).collect()
}

fn mat_vec(m: &Mat<f64>, v: &[f64]) -> Vec<f64> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)] * v[j]).sum()).collect()
}

fn svr_grid(
    train: Split,
    val: Split,
    j: usize,
    cfg: &TrainingConfig,
    gammas: &[f64],
    lambdas: &[f64],
) -> Result<Vec<GridPoint>> {
    let y = column(train.targets, j);
    let y_val: Vec<Vec<f64>> = val.targets.iter().map(|t| vec![t[j]]).collect();
    let per_gamma: Vec<Result<Vec<GridPoint>>> = gammas
        .par_iter()
        .map(|&gamma| {
            let spec = KernelSpec::new(cfg.kernel, gamma)?;
            let k = gram_matrix(train.inputs, &spec)?;
            let cross = cross_gram(val.inputs, train.inputs, &spec)?;
            let mut out = Vec::new();
            for &lambda in lambdas {
                match svr_solve(&k, &y, &SvrOptions::new(lambda, cfg.epsilon_tube)) {
                    Ok(sol) => {
                        let pred: Vec<Vec<f64>> = mat_vec(&cross, &sol.alphas).into_iter().map(|p| vec![p]).collect();
                        let e = nrmse(&pred, &y_val)?;
                        if e.is_finite() {
                            out.push(GridPoint { gamma, output_gamma: None, lambda, validation_nrmse: e });
                        }
                    }
                    Err(e) => warn!("SVR skipped at gamma = {gamma}, lambda = {lambda}: {e}"),
                }
            }
            Ok(out)
        })
        .collect();
    let mut points = Vec::new();
    for p in per_gamma {
        points.extend(p?);
    }
    Ok(points)
}

fn svr_fit(train: Split, j: usize, cfg: &TrainingConfig, p: &GridPoint) -> Result<SvrModel> {
    let spec = KernelSpec::new(cfg.kernel, p.gamma)?;
    let k = gram_matrix(train.inputs, &spec)?;
    let sol = svr_solve(&k, &column(train.targets, j), &SvrOptions::new(p.lambda, cfg.epsilon_tube))?;
    Ok(SvrModel {
        alphas: sol.alphas,
        training_inputs: train.inputs.to_vec(),
        kernel: spec,
        lambda: p.lambda,
        epsilon_tube: cfg.epsilon_tube,
    })
}

fn ovk_grid(
    train: Split,
    val: Split,
    cfg: &TrainingConfig,
    gammas: &[f64],
    out_gammas: &[f64],
    lambdas: &[f64],
) -> Result<Vec<GridPoint>> {
    let combos: Vec<(f64, f64)> = gammas.iter().flat_map(|&g| out_gammas.iter().map(move |&o| (g, o))).collect();
    let per: Vec<Result<Vec<GridPoint>>> = combos
        .par_iter()
        .map(|&(gamma, og)| {
            let spec = KernelSpec::new(cfg.kernel, gamma)?;
            let out_spec = KernelSpec::new(KernelKind::GaussianOutput, og)?;
            let k = gram_matrix(train.inputs, &spec)?;
            let mut points = Vec::new();
            for &lambda in lambdas {
                let trained = ovk_train_gram(
                    train.inputs,
                    train.targets,
                    k.clone(),
                    spec,
                    out_spec,
                    lambda,
                    cfg.eps_reg,
                    &GmresOptions::default(),
                );
                let model = match trained {
                    Ok(m) => m,
                    Err(e) => {
                        warn!("OVK skipped at gamma = {gamma}, output gamma = {og}, lambda = {lambda}: {e}");
                        continue;
                    }
                };
                let pred = val
                    .inputs
                    .iter()
                    .map(|x| ovk_predict(&model, x).map(|p| p.y))
                    .collect::<Result<Vec<_>>>()?;
                let e = nrmse(&pred, val.targets)?;
                if e.is_finite() {
                    points.push(GridPoint { gamma, output_gamma: Some(og), lambda, validation_nrmse: e });
                }
            }
            Ok(points)
        })
        .collect();
    let mut points = Vec::new();
    for p in per {
        points.extend(p?);
    }
    Ok(points)
}

fn ovk_fit(train: Split, cfg: &TrainingConfig, p: &GridPoint) -> Result<Predictor> {
    let spec = KernelSpec::new(cfg.kernel, p.gamma)?;
    let out_spec = KernelSpec::new(KernelKind::GaussianOutput, p.output_gamma.expect("ovk point"))?;
    let k = gram_matrix(train.inputs, &spec)?;
    let m = ovk_train_gram(train.inputs, train.targets, k, spec, out_spec, p.lambda, cfg.eps_reg, &GmresOptions::default())?;
    Ok(Predictor::Ovk(m))
}

/// Outcome of hyperparameter selection on normalized targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub predictor: Predictor,
    /// Chosen point per SVR target, or the single chosen point.
    pub chosen: Vec<GridPoint>,
    pub evaluated: usize,
    /// Hidden widths of the selected network.
    pub architecture: Option<Vec<usize>>,
    pub validation_nrmse: f64,
}

/// Grid search (or architecture search) on `train`, scored on `val`.
/// Targets must already be normalized. `total` sizes the network schedule.
pub fn grid_search(train: Split, val: Split, cfg: &TrainingConfig, total: usize, seed: u64) -> Result<Trained> {
    cfg.validate()?;
    if train.inputs.is_empty() || val.inputs.is_empty() {
        return Err(Error::Precondition("train and validation splits must be nonempty".into()));
    }
    let d = train.targets[0].len();
    let trained = match cfg.method {
        Method::Svr => {
            let mut models = Vec::with_capacity(d);
            let mut chosen = Vec::with_capacity(d);
            let mut evaluated = 0;
            for j in 0..d {
                let mut points = svr_grid(train, val, j, cfg, &cfg.input_gammas(), &cfg.lambdas)?;
                if cfg.refine {
                    if let Some(w) = best_point(&points) {
                        let g = refined(&cfg.input_gammas(), w.gamma, 2.0);
                        let l = refined(&cfg.lambdas, w.lambda, 10.0);
                        points.extend(svr_grid(train, val, j, cfg, &g, &l)?);
                    }
                }
                evaluated += points.len();
                let best = best_point(&points)
                    .ok_or_else(|| Error::Training(format!("every SVR grid point failed for target {j}")))?;
                models.push(svr_fit(train, j, cfg, &best)?);
                chosen.push(best);
            }
            Trained {
                predictor: Predictor::Svr(models),
                chosen,
                evaluated,
                architecture: None,
                validation_nrmse: f64::NAN,
            }
        }
        Method::Ovk => {
            let mut points = ovk_grid(train, val, cfg, &cfg.input_gammas(), &cfg.output_gammas, &cfg.lambdas)?;
            if cfg.refine {
                if let Some(w) = best_point(&points) {
                    let g = refined(&cfg.input_gammas(), w.gamma, 2.0);
                    let o = refined(&cfg.output_gammas, w.output_gamma.expect("ovk point"), 2.0);
                    let l = refined(&cfg.lambdas, w.lambda, 10.0);
                    points.extend(ovk_grid(train, val, cfg, &g, &o, &l)?);
                }
            }
            let best = best_point(&points).ok_or_else(|| Error::Training("every OVK grid point failed".into()))?;
            Trained {
                predictor: ovk_fit(train, cfg, &best)?,
                chosen: vec![best],
                evaluated: points.len(),
                architecture: None,
                validation_nrmse: f64::NAN,
            }
        }
        Method::Ffnn => {
            let mut schedule = TrainSchedule::for_dataset(total, train.inputs.len(), seed);
            schedule.max_steps = cfg.max_steps.unwrap_or(schedule.max_steps);
            schedule.patience = cfg.patience.unwrap_or(schedule.patience).min(schedule.max_steps);
            schedule.learning_rate = cfg.learning_rate;
            let shapes: Vec<&[usize]> = cfg.architectures.iter().map(Vec::as_slice).collect();
            let run = ffnn_architecture_search(train, val, &shapes, &schedule)?;
            Trained {
                architecture: Some(run.model.hidden.clone()),
                predictor: Predictor::Ffnn(run.model),
                chosen: vec![],
                evaluated: shapes.len(),
                validation_nrmse: f64::NAN,
            }
        }
    };
    let pred = predict_all(&trained.predictor, val.inputs)?;
    let validation_nrmse = nrmse(&pred, val.targets)?;
    Ok(Trained { validation_nrmse, ..trained })
}

/// Prediction in normalized target units.
pub fn predict_normalized(predictor: &Predictor, x: &[f64]) -> Result<Vec<f64>> {
    match predictor {
        Predictor::Svr(models) => models.iter().map(|m| m.predict(x)).collect(),
        Predictor::Ovk(m) => Ok(ovk_predict(m, x)?.y),
        Predictor::Ffnn(m) => m.forward(x),
    }
}

pub fn predict_all(predictor: &Predictor, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    xs.par_iter().map(|x| predict_normalized(predictor, x)).collect()
}

/// Denormalized parameter estimates from a saved model.
pub fn predict_params(model: &SavedModel, x: &[f64]) -> Result<Vec<f64>> {
    let norm = Normalizer {
        maxima: model.meta.target_max.clone(),
    };
    Ok(norm.denormalize(&predict_normalized(&model.predictor, x)?))
}

/// One train/validate/test run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolRun {
    pub split: SplitAssignment,
    pub trained: Trained,
    pub model: SavedModel,
    pub test_nrmse: f64,
}

/// Splits `data`, selects hyperparameters on the validation part and scores
/// the test part, all on targets normalized by `norm`.
pub fn run_protocol(data: &LearningData, norm: &Normalizer, cfg: &TrainingConfig, seed: u64) -> Result<ProtocolRun> {
    let split = split_dataset(data.len(), seed)?;
    let ys = norm.normalize_all(&data.targets);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (
            idx.iter().map(|&i| data.inputs[i].clone()).collect(),
            idx.iter().map(|&i| ys[i].clone()).collect(),
        )
    };
    let (tx, ty) = pick(&split.train);
    let (vx, vy) = pick(&split.validation);
    let (sx, sy) = pick(&split.test);
    let trained = grid_search(
        Split { inputs: &tx, targets: &ty },
        Split { inputs: &vx, targets: &vy },
        cfg,
        data.len(),
        seed,
    )?;
    let test_nrmse = nrmse(&predict_all(&trained.predictor, &sx)?, &sy)?;
    let model = SavedModel {
        meta: ModelMeta {
            features: data.features.clone(),
            target_names: data.target_names.clone(),
            target_max: norm.maxima.clone(),
            extra_scale: data.extra_scale.clone(),
            split_seed: seed,
        },
        predictor: trained.predictor.clone(),
    };
    Ok(ProtocolRun {
        split,
        trained,
        model,
        test_nrmse,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragedNrmse {
    pub mean: f64,
    pub runs: Vec<f64>,
}

/// Mean test NRMSE over disjoint consecutive subsets of size `m`
/// (one run on the first `m` records when `m` exceeds the averaging limit).
pub fn averaged_nrmse(data: &LearningData, m: usize, cfg: &TrainingConfig, seed: u64) -> Result<AveragedNrmse> {
    if m < 5 || m > data.len() {
        return Err(Error::Precondition(format!(
            "subset size {m} needs 5 ≤ m ≤ pool size {}",
            data.len()
        )));
    }
    let norm = Normalizer::fit(&data.targets)?;
    let chunks = if m > AVERAGING_LIMIT { 1 } else { data.len() / m };
    let runs = (0..chunks)
        .map(|k| {
            let idx: Vec<usize> = (k * m..(k + 1) * m).collect();
            run_protocol(&data.subset(&idx), &norm, cfg, seed.wrapping_add(k as u64)).map(|r| r.test_nrmse)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AveragedNrmse {
        mean: runs.iter().sum::<f64>() / runs.len() as f64,
        runs,
    })
}

/// Connected components of the graph joining histograms with
/// `d²_W ≤ threshold`; largest first, ties by smallest member.
pub fn cluster_patterns(rdhs: &[Vec<f64>], threshold: f64) -> Result<Vec<Vec<usize>>> {
    if !(threshold >= 0.0 && threshold.is_finite()) {
        return Err(Error::Config(format!("threshold must be finite and nonnegative, got {threshold}")));
    }
    let n = rdhs.len();
    let mut sets = petgraph::unionfind::UnionFind::<usize>::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if wasserstein_sq(&rdhs[i], &rdhs[j])? <= threshold {
                sets.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        groups.entry(sets.find(i)).or_default().push(i);
    }
    let mut comps: Vec<Vec<usize>> = groups.into_values().collect();
    comps.sort_by(|x, y| y.len().cmp(&x.len()).then(x[0].cmp(&y[0])));
    Ok(comps)
}

/// Rank-2 truncated SVD of the row-stacked histograms; rows of `U₂ Σ₂`.
pub fn embed_2d(rdhs: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = rdhs.len();
    if n < 2 {
        return Err(Error::Precondition("embedding needs at least two histograms".into()));
    }
    let b = rdhs[0].len();
    if let Some(r) = rdhs.iter().find(|r| r.len() != b) {
        return Err(Error::shape(b, r.len()));
    }
    let x = Mat::from_fn(n, b, |i, j| rdhs[i][j]);
    let svd = x.thin_svd().map_err(|e| Error::Numerical(format!("SVD failed: {e:?}")))?;
    let (u, s) = (svd.U(), svd.S().column_vector());
    let sigma = |k: usize| if k < s.nrows() { s[k] } else { 0.0 };
    let rank_two = sigma(1) > 1e-12 * sigma(0);
    if !rank_two {
        warn!("histogram matrix has rank below 2; second coordinate set to 0");
    }
    let mut out = vec![[0.0; 2]; n];
    for k in 0..2 {
        if k == 1 && !rank_two || sigma(k) == 0.0 {
            continue;
        }
        let col: Vec<f64> = (0..n).map(|i| u[(i, k)]).collect();
        let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (o, c) in out.iter_mut().zip(&col) {
            o[k] = sign * c * sigma(k);
        }
    }
    Ok(out)
}

/// Resistance-distance histogram of one pattern under a saved feature spec.
pub fn pattern_features(pattern: &PatternField, spec: &FeatureSpec) -> Result<(Vec<f64>, Option<(f64, usize)>)> {
    let field = pattern.species(spec.species)?;
    crate::features::check_nondegenerate(pattern, spec.species)?;
    let graph = pattern_graph_from_values(pattern.grid, field, spec.epsilon_weight)?;
    let cfg = RdhConfig::new(spec.radius, spec.bins, spec.r_max)?;
    let rdh = crate::features::compute_rdh(&graph, &cfg)?.values;
    let extras = if spec.extras {
        Some((maximal_concentration_of(field)?, connected_components_high_of(&pattern.grid, field)?))
    } else {
        None
    };
    Ok((rdh, extras))
}

/// Model input for a pattern, ready for [`predict_params`].
pub fn model_input(model: &SavedModel, pattern: &PatternField) -> Result<Vec<f64>> {
    let (rdh, extras) = pattern_features(pattern, &model.meta.features)?;
    assemble_input(&rdh, extras.map(|e| e.0), extras.map(|e| e.1), &model.meta.extra_scale)
}
