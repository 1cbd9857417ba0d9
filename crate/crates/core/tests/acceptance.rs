//! Acceptance criteria 1-12; one PASS/FAIL line per criterion.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use faer::linalg::solvers::Solve;
use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use turing_rdh::features::{
    pattern_graph_from_values, quantile, rdh_from_values, collect_resistances, RdhConfig, ResistanceResult,
    WeightedGraph, DEFAULT_EPSILON_WEIGHT, R_MAX_QUANTILE,
};
use turing_rdh::formats::read_pattern;
use turing_rdh::kernels::{gram_matrix, wasserstein_sq, KernelKind, KernelSpec};
use turing_rdh::neural::{ffnn_gradient, mse, FfnnModel, DEFAULT_ARCHITECTURES};
use turing_rdh::ovk::{ovk_train_gram, preimage, GmresOptions};
use turing_rdh::pipeline::{
    averaged_nrmse, build_dataset, cluster_patterns, embed_2d, generate_dataset, Candidate, Dataset, FeatureOptions,
    LearningData, SamplingPlan, Target, TrainingConfig,
};
use turing_rdh::simulate::coefficient_of_variation;
use turing_rdh::svr::{primal_objective, svr_solve, SvrOptions};
use turing_rdh::{gm_stability, simulate_gm, GmParams, PatternField, SimConfig, SpectralOperator, TorusGrid};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const PATTERNING: GmParams = GmParams { a: 0.01, b: 1.2, c: 0.7, delta: 40.0, s: 1.0 };

fn c1_spectral() -> Outcome {
    let grid = TorusGrid::new(8).unwrap();
    let l = dense_laplacian(8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for hd in [0.2 * 1.0, 0.2 * 40.0, 8.0] {
        let op = SpectralOperator::new(grid, hd).unwrap();
        let a = Mat::<f64>::identity(64, 64) + &l * faer::Scale(hd);
        let lu = a.partial_piv_lu();
        for _ in 0..100 {
            let b: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = op.solve(&b).unwrap();
            let dense = lu.solve(Mat::from_fn(64, 1, |i, _| b[i]));
            let reference: Vec<f64> = (0..64).map(|i| dense[(i, 0)]).collect();
            worst = worst.max(relative_error(&x, &reference));
        }
    }
    check(worst <= 1e-10, format!("max relative error {worst:.2e} (tol 1e-10)"))
}

fn c2_turing() -> Outcome {
    let patterning = gm_stability(&PATTERNING).map_err(|e| e.to_string())?;
    let mut detail = format!(
        "patterning turing={} q2*={:.4} growth={:.4}",
        patterning.turing, patterning.q2_star, patterning.max_growth
    );
    let mut ok = patterning.turing && patterning.q2_star > 0.0 && patterning.q2_star.is_finite() && patterning.max_growth > 0.0;
    for delta in [50.0, 100.0] {
        let r = gm_stability(&GmParams { a: 0.02, b: 1.0, c: 1.2, delta, s: 0.5 }).map_err(|e| e.to_string())?;
        detail.push_str(&format!("; flat delta={delta} turing={}", r.turing));
        ok &= !r.turing;
    }
    check(ok, detail)
}

fn c3_simulation() -> Outcome {
    let grid = TorusGrid::new(64).unwrap();
    let cfg = SimConfig::default();
    let pattern = simulate_gm(&PATTERNING, grid, &cfg).map_err(|e| e.to_string())?;
    let flat = simulate_gm(&GmParams { a: 0.02, b: 1.0, c: 1.2, delta: 50.0, s: 0.5 }, grid, &cfg).map_err(|e| e.to_string())?;
    let cv_pattern = coefficient_of_variation(pattern.species(0).unwrap());
    let cv_flat = coefficient_of_variation(flat.species(0).unwrap());
    check(
        cv_pattern > 0.1 && cv_flat < 1e-3,
        format!("CV(u1) patterning = {cv_pattern:.4} (> 0.1), flat = {cv_flat:.2e} (< 1e-3)"),
    )
}

fn c4_resistance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for k in 0..50 {
        let side = if k % 2 == 0 { 3 } else { 4 };
        let edges = random_torus_edges(side, &mut rng);
        let m = side * side;
        let lp = pseudoinverse(&weighted_laplacian(m, &edges));
        let res = ResistanceResult::compute(&WeightedGraph::new(m, edges).unwrap()).unwrap();
        for v in 0..m {
            for w in 0..m {
                worst = worst.max((res.get(v, w) - pinv_resistance(&lp, v, w)).abs());
            }
        }
    }
    let mut series_ok = true;
    for w in [1.0, 0.003, 0.5, 2.0] {
        let r = turing_rdh::features::resistance(&WeightedGraph::new(2, vec![(0, 1, w)]).unwrap(), 0, 1).unwrap();
        series_ok &= r == 1.0 / w;
    }
    check(
        worst <= 1e-8 && series_ok,
        format!("max deviation from pseudoinverse {worst:.2e} (tol 1e-8); two-node 1/w exact: {series_ok}"),
    )
}

struct Corpus {
    dataset: Dataset,
    /// Corpus index to c-value index.
    c_index: BTreeMap<usize, usize>,
    patterns: Vec<PatternField>,
}

const CORPUS_C: [f64; 6] = [0.01, 0.238, 0.466, 0.694, 0.922, 1.15];
const CORPUS_SEEDS: usize = 10;

fn corpus() -> Corpus {
    let mut candidates = Vec::new();
    let mut c_index = BTreeMap::new();
    for (ci, &c) in CORPUS_C.iter().enumerate() {
        for k in 0..CORPUS_SEEDS {
            let id = candidates.len();
            c_index.insert(id, ci);
            candidates.push(Candidate {
                id,
                params: GmParams { a: 0.02, b: 1.0, c, delta: 100.0, s: 0.25 },
                seed: 1000 * ci as u64 + k as u64,
            });
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let opts = FeatureOptions { radii: vec![8.0], ..FeatureOptions::default() };
    let dataset = build_dataset(&candidates, 64, &SimConfig::default(), &opts, 0, candidates.len(), Some(dir.path())).unwrap();
    let patterns = dataset.manifest.iter().map(|r| read_pattern(&dir.path().join(&r.path)).unwrap()).collect();
    Corpus { dataset, c_index, patterns }
}

/// Histograms of `field` at every config, from one Gram matrix in the canonical frame.
fn rdh_bits(grid: TorusGrid, field: &[f64], cfgs: &[RdhConfig]) -> Vec<Vec<u64>> {
    let graph = pattern_graph_from_values(grid, field, DEFAULT_EPSILON_WEIGHT).unwrap().canonical();
    let res = ResistanceResult::compute(&graph.to_weighted()).unwrap();
    cfgs.iter()
        .map(|cfg| {
            let values = collect_resistances(&res, &grid, cfg.radius, 1).unwrap();
            rdh_from_values(&values, cfg).unwrap().values.iter().map(|v| v.to_bits()).collect()
        })
        .collect()
}

fn c5_invariance(corpus: &Corpus) -> Outcome {
    // Two seeds for four c values, one for the remaining two.
    let picks: Vec<usize> = (0..6).map(|ci| ci * CORPUS_SEEDS).chain((0..4).map(|ci| ci * CORPUS_SEEDS + 1)).collect();
    let mut failures = Vec::new();
    for &i in &picks {
        let p = &corpus.patterns[i];
        let grid = p.grid;
        let n = grid.side();
        let u = p.species(0).unwrap();
        // r_max is the pattern's own 0.99 quantile, so it sits exactly on a sampled value.
        let graph = pattern_graph_from_values(grid, u, DEFAULT_EPSILON_WEIGHT).unwrap().canonical();
        let res = ResistanceResult::compute(&graph.to_weighted()).unwrap();
        let mut base = Vec::new();
        let mut cfgs = Vec::new();
        for r in [8.0, 32.0] {
            let values = collect_resistances(&res, &grid, r, 1).unwrap();
            let r_max = quantile(&mut values.clone(), R_MAX_QUANTILE).unwrap();
            let cfg = RdhConfig::new(r, 12, r_max).unwrap();
            base.push(rdh_from_values(&values, &cfg).unwrap().values.iter().map(|v| v.to_bits()).collect::<Vec<u64>>());
            cfgs.push(cfg);
        }
        let mean = u.iter().sum::<f64>() / u.len() as f64;
        let variants: [(&str, Vec<f64>); 5] = [
            ("translation", translate(n, u, 17, 41)),
            ("rotation", rotate(n, u)),
            ("shift", u.iter().map(|v| v + 0.75).collect()),
            ("scale", u.iter().map(|v| v * 2.5).collect()),
            ("reflection", u.iter().map(|v| 2.0 * mean - v).collect()),
        ];
        for (name, field) in variants {
            if rdh_bits(grid, &field, &cfgs) != base {
                failures.push(format!("pattern {i} {name}"));
            }
        }
    }
    check(
        failures.is_empty(),
        format!("{} patterns x 5 transforms x radii 8,32; changed: {failures:?}", picks.len()),
    )
}

fn c6_wasserstein() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let b = rng.gen_range(1..=8);
        let mut hist = || {
            let raw: Vec<f64> = (0..b).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>() }).collect();
            let s: f64 = raw.iter().sum();
            if s == 0.0 {
                let mut d = vec![0.0; b];
                d[0] = 1.0;
                d
            } else {
                raw.iter().map(|v| v / s).collect::<Vec<f64>>()
            }
        };
        let (x, y) = (hist(), hist());
        worst = worst.max((wasserstein_sq(&x, &y).unwrap() - lp_wasserstein(&x, &y)).abs());
    }
    let delta = wasserstein_sq(&[1.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0]).unwrap();
    check(
        worst <= 1e-8 && delta == 4.0,
        format!("max |sweep - LP| {worst:.2e} (tol 1e-8); delta pair (1,3) = {delta}"),
    )
}

fn c7_svr() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst_obj, mut worst_kkt) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let xs: Vec<Vec<f64>> = (0..5)
            .map(|_| {
                let raw: Vec<f64> = (0..6).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let y: Vec<f64> = (0..5).map(|_| rng.gen::<f64>()).collect();
        let lambda = 10f64.powf(rng.gen_range(-3.0..0.0));
        let eps = if rng.gen_bool(0.5) { 0.0 } else { 0.05 };
        let k = gram_matrix(&xs, &KernelSpec::new(KernelKind::Wasserstein, rng.gen_range(0.1..2.0)).unwrap()).unwrap();
        let sol = svr_solve(&k, &y, &SvrOptions::new(lambda, eps)).unwrap();
        let ours = primal_objective(&k, &y, &sol.alphas, lambda, eps);
        let reference = reference_svr_objective(&k, &y, lambda, eps);
        worst_obj = worst_obj.max((ours - reference).abs() / reference.abs().max(1e-12));
        worst_kkt = worst_kkt.max(sol.kkt_residual);
    }
    check(
        worst_obj <= 1e-5 && worst_kkt <= 1e-6,
        format!("max relative objective gap {worst_obj:.2e} (tol 1e-5); max KKT residual {worst_kkt:.2e} (tol 1e-6)"),
    )
}

fn c8_ovk() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_u = 0.0f64;
    let mut worst_pre = 0.0f64;
    for n in [5, 12, 25] {
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let ys: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.gen::<f64>()).collect()).collect();
        let spec = KernelSpec::new(KernelKind::Wasserstein, 0.5).unwrap();
        let out = KernelSpec::new(KernelKind::GaussianOutput, 0.5).unwrap();
        let lambda = 1e-3;
        let k = gram_matrix(&xs, &spec).unwrap();
        let model = ovk_train_gram(&xs, &ys, k, spec, out, lambda, 1e-4, &GmresOptions::default()).unwrap();
        let system = kron(&model.k_n, &model.t_n) + Mat::<f64>::identity(n * n, n * n) * faer::Scale(n as f64 * lambda);
        let dense = system.partial_piv_lu().solve(vec_of(&Mat::<f64>::identity(n, n)));
        let diff = &vec_of(&model.u) - &dense;
        worst_u = worst_u.max(max_abs(&diff) / max_abs(&dense));
        for i in 0..n {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            let p = preimage(&v, &ys, out.gamma).unwrap();
            let err = p.y.iter().zip(&ys[i]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst_pre = worst_pre.max(err);
        }
    }
    check(
        worst_u <= 1e-6 && worst_pre <= 1e-3,
        format!("GMRES vs dense Kronecker {worst_u:.2e} (tol 1e-6); one-hot pre-image error {worst_pre:.2e} (tol 1e-3)"),
    )
}

fn c9_gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for hidden in DEFAULT_ARCHITECTURES {
        for seed in 0..3u64 {
            for outputs in [1, 4] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let model = FfnnModel::random(12, hidden, outputs, &mut rng).unwrap();
                let xs: Vec<Vec<f64>> = (0..10).map(|_| (0..12).map(|_| rng.gen::<f64>()).collect()).collect();
                let ys: Vec<Vec<f64>> = (0..10).map(|_| (0..outputs).map(|_| rng.gen::<f64>()).collect()).collect();
                let (_, grad) = ffnn_gradient(&model, &xs, &ys).unwrap();
                let fd = numeric_gradient(&model.params, |p| {
                    let mut m = model.clone();
                    m.params = p.to_vec();
                    mse(&m, &xs, &ys).unwrap()
                });
                worst = worst.max(relative_error(&grad, &fd));
                checked += 1;
            }
        }
    }
    check(worst <= 1e-4, format!("{checked} networks, max relative gradient error {worst:.2e} (tol 1e-4)"))
}

fn c10_single_parameter() -> Outcome {
    let plan = SamplingPlan::single_parameter(100, 64, 2024);
    let opts = FeatureOptions { radii: vec![8.0], ..FeatureOptions::default() };
    let ds = generate_dataset(&plan, &SimConfig::default(), &opts, None).map_err(|e| e.to_string())?;
    let data = LearningData::from_dataset(&ds, 8.0, &Target::One("c"), false).map_err(|e| e.to_string())?;
    let cfg = TrainingConfig::default();
    let avg = averaged_nrmse(&data, data.len(), &cfg, 2024).map_err(|e| e.to_string())?;
    check(
        avg.mean <= 0.25,
        format!("{} patterns ({} excluded), Wasserstein SVR test NRMSE {:.4} (tol 0.25)", data.len(), ds.meta.excluded.len(), avg.mean),
    )
}

fn corpus_rdhs(corpus: &Corpus) -> (Vec<usize>, Vec<Vec<f64>>) {
    let rows = corpus.dataset.rows_at(8.0);
    (rows.iter().map(|r| r.id).collect(), rows.iter().map(|r| r.rdh.clone()).collect())
}

fn c11_clusters(corpus: &Corpus) -> Outcome {
    let (ids, rdhs) = corpus_rdhs(corpus);
    let comps = cluster_patterns(&rdhs, 0.05).unwrap();
    let step = CORPUS_C[1] - CORPUS_C[0];
    let mut pure_members = 0;
    let mut pure_components = 0;
    for comp in &comps {
        let cs: Vec<f64> = comp.iter().map(|&i| CORPUS_C[corpus.c_index[&ids[i]]]).collect();
        let spread = cs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - cs.iter().copied().fold(f64::INFINITY, f64::min);
        if spread <= step + 1e-9 {
            pure_members += comp.len();
            pure_components += 1;
        }
    }
    let total = corpus.patterns.len();
    let frac = pure_members as f64 / total as f64;
    let sizes: Vec<usize> = comps.iter().map(Vec::len).collect();
    check(
        frac >= 0.8,
        format!(
            "{pure_members}/{total} = {frac:.3} in pure components (tol 0.8); {} components ({pure_components} pure), sizes {sizes:?}",
            comps.len()
        ),
    )
}

fn c12_embedding(corpus: &Corpus) -> Outcome {
    let (ids, rdhs) = corpus_rdhs(corpus);
    let pts = embed_2d(&rdhs).unwrap();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
            if corpus.c_index[&ids[i]] == corpus.c_index[&ids[j]] {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    let (intra, inter) = (intra / n_intra as f64, inter / n_inter as f64);
    check(intra < inter, format!("mean intra-c distance {intra:.4} < inter-c {inter:.4}"))
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(d) => {
            println!("PASS {name}: {d} [{secs:.1}s]");
            true
        }
        Err(d) => {
            println!("FAIL {name}: {d} [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= run("C1 spectral solver", c1_spectral);
    ok &= run("C2 Turing verdicts", c2_turing);
    ok &= run("C3 simulation dichotomy", c3_simulation);
    ok &= run("C4 resistance oracle", c4_resistance);
    let start = Instant::now();
    let corpus = catch_unwind(corpus);
    println!("corpus of {} patterns built in {:.1}s", CORPUS_C.len() * CORPUS_SEEDS, start.elapsed().as_secs_f64());
    match &corpus {
        Ok(c) => ok &= run("C5 RDH invariance", || c5_invariance(c)),
        Err(_) => ok &= run("C5 RDH invariance", || Err("corpus generation failed".into())),
    }
    ok &= run("C6 Wasserstein oracle", c6_wasserstein);
    ok &= run("C7 SVR correctness", c7_svr);
    ok &= run("C8 OVK correctness", c8_ovk);
    ok &= run("C9 FFNN gradients", c9_gradients);
    ok &= run("C10 single-parameter replication", c10_single_parameter);
    match &corpus {
        Ok(c) => {
            ok &= run("C11 clustering purity", || c11_clusters(c));
            ok &= run("C12 embedding separation", || c12_embedding(c));
        }
        Err(_) => {
            ok &= run("C11 clustering purity", || Err("corpus generation failed".into()));
            ok &= run("C12 embedding separation", || Err("corpus generation failed".into()));
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
