//! Command-line front end: simulation, stability, datasets, training and analysis.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use turing_rdh::features::{pattern_graph_from_values, ResistanceResult, DEFAULT_EPSILON_WEIGHT};
use turing_rdh::formats::{read_model, read_pattern, write_model, write_pattern, FeatureSpec};
use turing_rdh::model::dispersion_curve;
use turing_rdh::pipeline::{
    cluster_patterns, embed_2d, generate_dataset, model_input, nrmse, pattern_features, predict_all, predict_params,
    run_protocol, split_dataset, LearningData, Normalizer, Target,
};
use turing_rdh::{gm_stability, simulate_gm, GiererMeinhardt, GmParams, ReactionModel, RunConfig, SimConfig, TorusGrid};

#[derive(Parser)]
#[command(name = "turing-rdh", version, about = "Turing-pattern parameter recovery from resistance-distance histograms")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one pattern to steady state.
    Simulate(SimulateArgs),
    /// Linear stability analysis of the homogeneous equilibrium.
    Stability(StabilityArgs),
    /// Dataset generation.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Histogram features of a pattern file.
    Features(FeaturesCmd),
    /// Grid-search and train a predictor on a dataset.
    Train(TrainArgs),
    /// Predict parameters for a pattern.
    Predict(PredictArgs),
    /// Score a model on a dataset split.
    Evaluate(EvaluateArgs),
    /// Connected components under the squared Wasserstein distance.
    Cluster(ClusterArgs),
    /// Rank-2 SVD coordinates of the dataset histograms.
    Embed(EmbedArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// a,b,c,delta,s
    #[arg(long, value_parser = parse_params)]
    params: GmParams,
    #[arg(long, default_value_t = 64)]
    grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file whose [simulation] section overrides the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StabilityArgs {
    #[arg(long, value_parser = parse_params)]
    params: GmParams,
    /// CSV of (q2, growth) pairs.
    #[arg(long)]
    dispersion_out: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    points: usize,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Sample, simulate and featurize per the config.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the sampling seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the pattern count.
        #[arg(long)]
        count: Option<usize>,
        /// Overrides the grid side.
        #[arg(long)]
        grid: Option<usize>,
    },
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
struct FeaturesCmd {
    #[command(subcommand)]
    command: Option<FeaturesCommand>,
    #[command(flatten)]
    args: FeaturesArgs,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long, required = true)]
    pattern: Option<PathBuf>,
    #[arg(long, required = true)]
    radius: Option<f64>,
    #[arg(long, default_value_t = 12)]
    bins: usize,
    #[arg(long, required = true)]
    rmax: Option<f64>,
    #[arg(long)]
    extras: bool,
    #[arg(long, default_value_t = DEFAULT_EPSILON_WEIGHT)]
    epsilon: f64,
    /// Species index (0 = activator).
    #[arg(long, default_value_t = 0)]
    species: usize,
    #[arg(long, required = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum FeaturesCommand {
    /// Resistance distance from one node to every node, as CSV.
    ResistanceMap {
        #[arg(long)]
        pattern: PathBuf,
        /// row,col of the source node.
        #[arg(long, value_parser = parse_node)]
        node: (usize, usize),
        #[arg(long, default_value_t = DEFAULT_EPSILON_WEIGHT)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        species: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Svr,
    Ovk,
    Ffnn,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    dataset: PathBuf,
    /// a, b, c, delta or all.
    #[arg(long, default_value = "c")]
    target: String,
    /// Histogram radius (default: the dataset's first).
    #[arg(long)]
    radius: Option<f64>,
    /// Append c_m and n_c to the inputs.
    #[arg(long)]
    extras: bool,
    /// TOML file whose [training] section overrides the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    pattern: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// CSV of per-record errors.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    threshold: f64,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_params(s: &str) -> Result<GmParams, String> {
    let v = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("'{t}' is not a number")))
        .collect::<Result<Vec<_>, _>>()?;
    GmParams::from_slice(&v).map_err(|e| e.to_string())
}

fn parse_node(s: &str) -> Result<(usize, usize), String> {
    match s.split(',').map(|t| t.trim().parse::<usize>()).collect::<Result<Vec<_>, _>>() {
        Ok(v) if v.len() == 2 => Ok((v[0], v[1])),
        _ => Err(format!("expected row,col but got '{s}'")),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let grid = TorusGrid::new(a.grid)?;
    let sim = match &a.config {
        Some(_) => load_config(a.config.as_deref())?.simulation,
        None => SimConfig::for_grid(a.grid),
    };
    let pattern = simulate_gm(&a.params, grid, &sim.with_seed(a.seed))?;
    write_pattern(&a.out, &pattern)?;
    println!("converged={}", pattern.converged);
    println!("elapsed_time={}", pattern.elapsed_time);
    println!("cv_u={}", pattern.coefficient_of_variation(0)?);
    Ok(())
}

fn cmd_stability(a: StabilityArgs) -> Result<()> {
    let report = gm_stability(&a.params)?;
    println!("equilibrium_u={}", report.equilibrium[0]);
    println!("equilibrium_v={}", report.equilibrium[1]);
    println!("ode_stable={}", report.ode_stable);
    println!("turing={}", report.turing);
    println!("q2_star={}", report.q2_star);
    println!("max_growth={}", report.max_growth);
    if let Some(path) = a.dispersion_out {
        let model = GiererMeinhardt::new(a.params)?;
        let curve = dispersion_curve(&model, &model.equilibrium()?, a.points)?;
        let mut text = String::from("q2,growth\n");
        for (q2, g) in curve {
            writeln!(text, "{q2},{g}")?;
        }
        write_text(&path, &text)?;
        println!("dispersion_points={}", a.points);
    }
    Ok(())
}

fn cmd_dataset(c: DatasetCommand) -> Result<()> {
    let DatasetCommand::Generate { config, out, seed, count, grid } = c;
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seed {
        cfg.sampling.seed = s;
    }
    if let Some(n) = count {
        cfg.sampling.count = n;
    }
    if let Some(g) = grid {
        cfg.sampling.grid_side = g;
    }
    cfg.validate()?;
    let ds = generate_dataset(&cfg.sampling, &cfg.simulation, &cfg.features, Some(&out))?;
    println!("patterns={}", ds.manifest.len());
    println!("draws={}", ds.meta.draws);
    println!("excluded={}", ds.meta.excluded.len());
    for s in &ds.meta.scales {
        println!("r_max[{}]={}", s.radius, s.r_max);
    }
    println!("dir={}", out.display());
    Ok(())
}

fn cmd_features(c: FeaturesCmd) -> Result<()> {
    if let Some(FeaturesCommand::ResistanceMap { pattern, node, epsilon, species, out }) = c.command {
        let p = read_pattern(&pattern)?;
        let n = p.grid.side();
        if node.0 >= n || node.1 >= n {
            bail!("node ({},{}) outside the {n}x{n} grid", node.0, node.1);
        }
        let graph = pattern_graph_from_values(p.grid, p.species(species)?, epsilon)?;
        let res = ResistanceResult::compute(&graph.to_weighted())?;
        let row = res.resistance_row(p.grid.node(node.0, node.1))?;
        let mut text = String::from("row,col,resistance\n");
        for (v, r) in row.iter().enumerate() {
            let (i, j) = p.grid.coords(v);
            writeln!(text, "{i},{j},{r}")?;
        }
        write_text(&out, &text)?;
        println!("nodes={}", row.len());
        println!("max_resistance={}", row.iter().copied().fold(0.0, f64::max));
        return Ok(());
    }
    let a = c.args;
    let (pattern, radius, r_max, out) = match (a.pattern, a.radius, a.rmax, a.out) {
        (Some(p), Some(r), Some(m), Some(o)) => (p, r, m, o),
        _ => bail!("--pattern, --radius, --rmax and --out are required"),
    };
    let p = read_pattern(&pattern)?;
    let spec = FeatureSpec {
        radius,
        bins: a.bins,
        r_max,
        epsilon_weight: a.epsilon,
        species: a.species,
        extras: a.extras,
    };
    let (rdh, extras) = pattern_features(&p, &spec)?;
    let mut text = String::from("radius");
    (1..=rdh.len()).for_each(|i| text.push_str(&format!(",bin_{i}")));
    text.push_str(",c_m,n_c\n");
    text.push_str(&radius.to_string());
    rdh.iter().for_each(|v| text.push_str(&format!(",{v}")));
    match extras {
        Some((cm, nc)) => {
            writeln!(text, ",{cm},{nc}")?;
            println!("c_m={cm}");
            println!("n_c={nc}");
        }
        None => text.push_str(",,\n"),
    }
    write_text(&out, &text)?;
    println!("bins={}", rdh.len());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut training = cfg.training;
    training.method = match a.method {
        MethodArg::Svr => turing_rdh::Method::Svr,
        MethodArg::Ovk => turing_rdh::Method::Ovk,
        MethodArg::Ffnn => turing_rdh::Method::Ffnn,
    };
    let seed = a.seed.unwrap_or(cfg.seed);
    let ds = turing_rdh::Dataset::load(&a.dataset)?;
    let radius = match a.radius {
        Some(r) => r,
        None => ds.meta.scales.first().ok_or_else(|| anyhow!("dataset has no feature radii"))?.radius,
    };
    let target: Target = a.target.parse()?;
    let data = LearningData::from_dataset(&ds, radius, &target, a.extras)?;
    let norm = Normalizer::fit(&data.targets)?;
    let run = run_protocol(&data, &norm, &training, seed)?;
    write_model(&a.out, &run.model)?;
    println!("method={}", run.model.predictor.method_name());
    println!("targets={}", data.target_names.join(","));
    println!("radius={radius}");
    println!("n_train={}", run.split.train.len());
    println!("n_validation={}", run.split.validation.len());
    println!("n_test={}", run.split.test.len());
    println!("grid_points={}", run.trained.evaluated);
    for (name, p) in data.target_names.iter().zip(&run.trained.chosen) {
        let label = if run.trained.chosen.len() > 1 { format!("[{name}]") } else { String::new() };
        println!("gamma{label}={}", p.gamma);
        if let Some(o) = p.output_gamma {
            println!("output_gamma{label}={o}");
        }
        println!("lambda{label}={}", p.lambda);
    }
    if let Some(arch) = &run.trained.architecture {
        println!("architecture=({})", arch.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
    }
    println!("validation_nrmse={}", run.trained.validation_nrmse);
    println!("test_nrmse={}", run.test_nrmse);
    println!("model={}", a.out.display());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let pattern = read_pattern(&a.pattern)?;
    let x = model_input(&model, &pattern)?;
    for (name, v) in model.meta.target_names.iter().zip(predict_params(&model, &x)?) {
        println!("{name}={v}");
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let ds = turing_rdh::Dataset::load(&a.dataset)?;
    let spec = &model.meta.features;
    let r_max = ds.meta.r_max(spec.radius)?;
    if r_max != spec.r_max || ds.meta.bins != spec.bins {
        bail!("dataset features (r_max {r_max}, {} bins) differ from the model's", ds.meta.bins);
    }
    let target = Target::from_names(&model.meta.target_names)?;
    let mut data = LearningData::from_dataset(&ds, spec.radius, &target, spec.extras)?;
    if spec.extras {
        // Rescale extras the way the model saw them.
        for (x, id) in data.inputs.iter_mut().zip(&data.ids) {
            let row = ds.features.iter().find(|f| f.id == *id && f.radius == spec.radius).expect("row exists");
            *x = turing_rdh::pipeline::assemble_input(&row.rdh, row.c_m, row.n_c, &model.meta.extra_scale)?;
        }
    }
    let idx: Vec<usize> = if a.split == SplitArg::All {
        (0..data.len()).collect()
    } else {
        let s = split_dataset(data.len(), model.meta.split_seed)?;
        match a.split {
            SplitArg::Train => s.train,
            SplitArg::Validation => s.validation,
            _ => s.test,
        }
    };
    let part = data.subset(&idx);
    let norm = Normalizer { maxima: model.meta.target_max.clone() };
    let pred = predict_all(&model.predictor, &part.inputs)?;
    let truth = norm.normalize_all(&part.targets);
    let score = nrmse(&pred, &truth)?;
    println!("records={}", part.len());
    println!("nrmse={score}");
    if let Some(out) = a.out {
        let mut text = String::from("id,target,true,predicted,abs_error\n");
        for ((id, p), y) in part.ids.iter().zip(&pred).zip(&part.targets) {
            for ((name, pv), yv) in model.meta.target_names.iter().zip(norm.denormalize(p)).zip(y) {
                writeln!(text, "{id},{name},{yv},{pv},{}", (pv - yv).abs())?;
            }
        }
        write_text(&out, &text)?;
    }
    Ok(())
}

/// Histograms at one radius with their manifest rows, in id order.
fn dataset_rdhs(dir: &Path, radius: Option<f64>) -> Result<(turing_rdh::Dataset, Vec<usize>, Vec<Vec<f64>>)> {
    let ds = turing_rdh::Dataset::load(dir)?;
    let radius = match radius {
        Some(r) => r,
        None => ds.meta.scales.first().ok_or_else(|| anyhow!("dataset has no feature radii"))?.radius,
    };
    let rows = ds.rows_at(radius);
    if rows.is_empty() {
        bail!("no features at radius {radius}");
    }
    let ids = rows.iter().map(|r| r.id).collect();
    let rdhs = rows.iter().map(|r| r.rdh.clone()).collect();
    Ok((ds, ids, rdhs))
}

fn params_csv(ds: &turing_rdh::Dataset, id: usize) -> String {
    ds.params_of(id)
        .map(|p| p.to_array().iter().map(f64::to_string).collect::<Vec<_>>().join(","))
        .unwrap_or_else(|| ",,,,".into())
}

fn cmd_cluster(a: ClusterArgs) -> Result<()> {
    let (ds, ids, rdhs) = dataset_rdhs(&a.dataset, a.radius)?;
    let comps = cluster_patterns(&rdhs, a.threshold)?;
    let mut text = String::from("component,id,a,b,c,delta,s\n");
    for (k, comp) in comps.iter().enumerate() {
        for &i in comp {
            writeln!(text, "{k},{},{}", ids[i], params_csv(&ds, ids[i]))?;
        }
    }
    write_text(&a.out, &text)?;
    println!("patterns={}", ids.len());
    println!("components={}", comps.len());
    println!("largest={}", comps.first().map_or(0, Vec::len));
    Ok(())
}

fn cmd_embed(a: EmbedArgs) -> Result<()> {
    let (ds, ids, rdhs) = dataset_rdhs(&a.dataset, a.radius)?;
    let pts = embed_2d(&rdhs)?;
    let mut text = String::from("id,x,y,a,b,c,delta,s\n");
    for (id, p) in ids.iter().zip(&pts) {
        writeln!(text, "{id},{},{},{}", p[0], p[1], params_csv(&ds, *id))?;
    }
    write_text(&a.out, &text)?;
    println!("points={}", pts.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            bail!("--jobs must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Stability(a) => cmd_stability(a),
        Command::Dataset { command } => cmd_dataset(command),
        Command::Features(c) => cmd_features(c),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Embed(a) => cmd_embed(a),
    }
}

/// 3 for degenerate features, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<turing_rdh::Error>() {
        Some(turing_rdh::Error::DegenerateFeature(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
