//! Command-line pipeline: generate, build graph, train, evaluate, explain.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
//! failure. `HIURNET_SEED` overrides every configured seed. Flags override
//! values from `--config <file.toml>`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, GravityManifest, ModelManifest};
use crate::error::{Error, Result};
use crate::explain::{regional_summary, AttributionRequest};
use crate::graph::{
    build_graph, split_edges, EdgeSplit, FlowKind, FlowRecord, GraphOptions, HeteroGraph,
    IndicatorTable, PerTask, Standardization, UnitId,
};
use crate::gravity::{evaluate_gravity, train_gravity, GravityInputs};
use crate::io;
use crate::metrics::MetricsReport;
use crate::model::ModelConfig;
use crate::synth::{generate_world, FlowProcess, WorldConfig};
use crate::train::{evaluate_model, train, TrainConfig};

pub const INDICATORS_FILE: &str = "indicators.csv";
pub const INCLUSION_FILE: &str = "inclusion.csv";
pub const FLOWS_FILE: &str = "flows.csv";
pub const COORDS_FILE: &str = "coords.csv";
pub const SPLIT_FILE: &str = "split.csv";
pub const WORLD_MANIFEST_FILE: &str = "world-manifest.json";
pub const GRAPH_SUMMARY_FILE: &str = "graph-summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const GRAVITY_CHECKPOINT_FILE: &str = "gravity.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const EVAL_REPORT_FILE: &str = "eval-report.json";
pub const ATTRIBUTION_FILE: &str = "attribution.csv";

/// Split and graph-assembly settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub geo_edges: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ratios: [0.8, 0.1, 0.1],
            geo_edges: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GravityConfig {
    pub tie_weights: bool,
}

/// Structured configuration file mirroring every module's settings, with the
/// module defaults. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gravity: GravityConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| {
            let line = e
                .span()
                .map(|span| 1 + text[..span.start.min(text.len())].matches('\n').count());
            match line {
                Some(line) => Error::InvalidConfig(format!(
                    "{}: line {line}: {}",
                    path.display(),
                    e.message()
                )),
                None => Error::InvalidConfig(format!("{}: {}", path.display(), e.message())),
            }
        })
    }
}

#[derive(Parser)]
#[command(
    name = "hiurnet",
    version,
    about = "Hierarchical urban graph embeddings for commuting flow prediction"
)]
struct Cli {
    /// TOML configuration file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Bound on worker threads for parallel stages (default: number of processors).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world into a data directory.
    GenSynth(GenSynthArgs),
    /// Validate inputs, split flow edges, and write the split and summary.
    BuildGraph(BuildGraphArgs),
    /// Train the hierarchical model and write a checkpoint plus history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split set, printing one block per task.
    Evaluate(EvaluateArgs),
    /// Attribute a city's largest inter-level flows to grids and indicators.
    Explain(ExplainArgs),
    /// Train the gravity baseline and write its checkpoint.
    GravityTrain(GravityTrainArgs),
    /// Evaluate a gravity checkpoint on a split set.
    GravityEvaluate(GravityEvaluateArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Output data directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// World seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Number of cities [default: 8].
    #[arg(long)]
    cities: Option<usize>,
    /// Grids per city side, so each city holds side^2 grids [default: 7].
    #[arg(long)]
    grid_side: Option<usize>,
    /// Fraction of ordered grid pairs with a nonzero flow [default: 0.05].
    #[arg(long)]
    density: Option<f64>,
    /// Log-normal multiplicative noise on volumes [default: 0.1].
    #[arg(long)]
    noise: Option<f64>,
    /// Flow process: feature-interaction or pure-gravity [default: feature-interaction].
    #[arg(long)]
    process: Option<String>,
}

#[derive(Args)]
struct BuildGraphArgs {
    /// Data directory holding the input CSV files.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (defaults to the data directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Split seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated train,val,test ratios [default: 0.8,0.1,0.1].
    #[arg(long)]
    ratios: Option<String>,
    /// Add planar adjacency edges between neighbouring grids.
    #[arg(long)]
    geo: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Data directory with the input CSV files.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (defaults to the data directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Split assignment file [default: <data>/split.csv].
    #[arg(long)]
    split: Option<PathBuf>,
    /// Training seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum epochs [default: 500].
    #[arg(long)]
    epochs: Option<usize>,
    /// Early-stopping patience in epochs [default: 20].
    #[arg(long)]
    patience: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// Embedding width [default: 128].
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Attention heads [default: 8].
    #[arg(long)]
    heads: Option<usize>,
    /// Attention layers [default: 3].
    #[arg(long)]
    layers: Option<usize>,
    /// Add planar adjacency edges between neighbouring grids.
    #[arg(long)]
    geo: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Data directory with the input CSV files.
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split assignment file [default: <data>/split.csv].
    #[arg(long)]
    split: Option<PathBuf>,
    /// Which records to score: test, val, or train.
    #[arg(long, default_value = "test")]
    set: String,
    /// Where to write the JSON report (defaults to eval-report.json in data).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    /// Data directory with the input CSV files.
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint to explain.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split assignment file [default: <data>/split.csv].
    #[arg(long)]
    split: Option<PathBuf>,
    /// Target city index.
    #[arg(long)]
    city: usize,
    /// How many of the city's largest inter-level flows to attribute [default: 10].
    #[arg(long)]
    k: Option<usize>,
    /// Integration steps along the baseline path [default: 128].
    #[arg(long)]
    steps: Option<usize>,
    /// Where to write the attribution CSV (defaults to attribution.csv in data).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GravityTrainArgs {
    /// Data directory with the input CSV files.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (defaults to the data directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Split assignment file [default: <data>/split.csv].
    #[arg(long)]
    split: Option<PathBuf>,
    /// Training seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum epochs [default: 500].
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// Share one population net between origin and destination.
    #[arg(long)]
    tie_weights: bool,
}

#[derive(Args)]
struct GravityEvaluateArgs {
    /// Data directory with the input CSV files.
    #[arg(long)]
    data: PathBuf,
    /// Gravity checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split assignment file [default: <data>/split.csv].
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    set: String,
    #[arg(long)]
    report: Option<PathBuf>,
}

pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            if e.use_stderr() {
                let msg = e.to_string();
                let first = msg.lines().next().unwrap_or("bad usage");
                eprintln!("error: {}", first.strip_prefix("error: ").unwrap_or(first));
                return 1;
            }
            print!("{e}");
            return 0;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));

    match cli.command {
        Command::GenSynth(args) => gen_synth(args, config),
        Command::BuildGraph(args) => build_graph_cmd(args, config),
        Command::Train(args) => train_cmd(args, config),
        Command::Evaluate(args) => evaluate_cmd(args, config),
        Command::Explain(args) => explain_cmd(args, config, workers),
        Command::GravityTrain(args) => gravity_train_cmd(args, config),
        Command::GravityEvaluate(args) => gravity_evaluate_cmd(args, config),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("HIURNET_SEED") {
        Ok(v) => v.parse::<u64>().map(Some).map_err(|_| {
            Error::InvalidConfig(format!("HIURNET_SEED must be an integer, got {v:?}"))
        }),
        Err(_) => Ok(None),
    }
}

/// `HIURNET_SEED` wins over both the config file and flags.
fn apply_env_seed(config: &mut RunConfig) -> Result<()> {
    if let Some(seed) = env_seed()? {
        config.world.seed = seed;
        config.split.seed = seed;
        config.train.seed = seed;
    }
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn gen_synth(args: GenSynthArgs, mut config: RunConfig) -> Result<()> {
    if let Some(seed) = args.seed {
        config.world.seed = seed;
    }
    if let Some(n) = args.cities {
        config.world.n_cities = n;
    }
    if let Some(side) = args.grid_side {
        config.world.grid_side = side;
    }
    if let Some(density) = args.density {
        config.world.flow_density = density;
    }
    if let Some(noise) = args.noise {
        config.world.noise_sd = noise;
    }
    if let Some(process) = &args.process {
        config.world.process = match process.as_str() {
            "feature-interaction" => FlowProcess::FeatureInteraction,
            "pure-gravity" => FlowProcess::PureGravity,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown process {other:?} (expected feature-interaction or pure-gravity)"
                )))
            }
        };
    }

    apply_env_seed(&mut config)?;
    let world = generate_world(&config.world)?;
    ensure_dir(&args.out)?;
    io::write_indicators(&args.out.join(INDICATORS_FILE), &world.indicators)?;
    io::write_inclusion(&args.out.join(INCLUSION_FILE), &world.inclusion)?;
    io::write_flows(&args.out.join(FLOWS_FILE), &world.flows)?;
    io::write_coords(&args.out.join(COORDS_FILE), &world.coords)?;
    write_json(&args.out.join(WORLD_MANIFEST_FILE), &world.manifest)?;
    println!(
        "generated world seed={} grids={} cities={} flows={}",
        config.world.seed,
        world.indicators.grid_count(),
        config.world.n_cities,
        world.flows.len()
    );
    Ok(())
}

struct LoadedData {
    indicators: IndicatorTable,
    inclusion: crate::graph::InclusionMap,
    flows: Vec<FlowRecord>,
    coords: Option<Vec<[f64; 2]>>,
}

fn load_data(dir: &Path) -> Result<LoadedData> {
    let indicators = io::load_grid_indicators(&dir.join(INDICATORS_FILE))?;
    let inclusion = io::load_inclusion(&dir.join(INCLUSION_FILE))?;
    let flows = io::load_flows(&dir.join(FLOWS_FILE))?;
    let coords_path = dir.join(COORDS_FILE);
    let coords = if coords_path.exists() {
        Some(io::load_coords(&coords_path)?)
    } else {
        None
    };
    Ok(LoadedData {
        indicators,
        inclusion,
        flows,
        coords,
    })
}

fn parse_ratios(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidConfig(format!("bad ratios {text:?}")))?;
    if parts.len() != 3 {
        return Err(Error::InvalidConfig(
            "ratios need exactly three values".into(),
        ));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn build_graph_cmd(args: BuildGraphArgs, mut config: RunConfig) -> Result<()> {
    if let Some(seed) = args.seed {
        config.split.seed = seed;
    }
    if let Some(ratios) = &args.ratios {
        config.split.ratios = parse_ratios(ratios)?;
    }
    if args.geo {
        config.split.geo_edges = true;
    }
    apply_env_seed(&mut config)?;
    let data = load_data(&args.data)?;
    let out = args.out.unwrap_or_else(|| args.data.clone());
    ensure_dir(&out)?;

    let options = GraphOptions {
        geo_edges: config.split.geo_edges,
    };
    let graph = build_graph(
        &data.indicators,
        &data.inclusion,
        &data.flows,
        data.coords.as_deref(),
        &options,
    )?;
    let ratios = config.split.ratios;
    let split = split_edges(
        &data.flows,
        (ratios[0], ratios[1], ratios[2]),
        config.split.seed,
    )?;
    io::write_split(&out.join(SPLIT_FILE), &split)?;

    let edge_counts: std::collections::BTreeMap<&str, usize> = graph
        .edges
        .iter()
        .map(|(ty, e)| (ty.as_str(), e.len()))
        .collect();
    let summary = serde_json::json!({
        "n_mesh": graph.n_mesh,
        "n_city": graph.n_city,
        "edges": edge_counts,
        "split": {
            "seed": config.split.seed,
            "ratios": ratios,
            "train": split.train.map(|_, v| v.len()),
            "val": split.val.map(|_, v| v.len()),
            "test": split.test.map(|_, v| v.len()),
        },
    });
    write_json(&out.join(GRAPH_SUMMARY_FILE), &summary)?;
    println!(
        "graph mesh={} city={} edges={} split train/val/test={}+{}+{}",
        graph.n_mesh,
        graph.n_city,
        graph.edges.values().map(Vec::len).sum::<usize>(),
        split.train.iter().map(|(_, v)| v.len()).sum::<usize>(),
        split.val.iter().map(|(_, v)| v.len()).sum::<usize>(),
        split.test.iter().map(|(_, v)| v.len()).sum::<usize>(),
    );
    Ok(())
}

/// Build the message-passing graph for training and evaluation: flow edges
/// from the training split only, structural edges always.
fn training_graph(
    data: &LoadedData,
    split: &EdgeSplit,
    standardization: Option<&Standardization>,
    geo_edges: bool,
) -> Result<HeteroGraph> {
    let standardized = match standardization {
        Some(stats) => data.indicators.standardize_with(stats)?,
        None => data.indicators.standardize(),
    };
    build_graph(
        &standardized,
        &data.inclusion,
        &split.train_records(),
        data.coords.as_deref(),
        &GraphOptions { geo_edges },
    )
}

fn load_split(
    dir: &Path,
    override_path: Option<&Path>,
    flows: &[FlowRecord],
    seed: u64,
) -> Result<EdgeSplit> {
    let path = override_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join(SPLIT_FILE));
    io::load_split(&path, flows, seed)
}

fn train_cmd(args: TrainArgs, mut config: RunConfig) -> Result<()> {
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.train.max_epochs = epochs;
    }
    if let Some(patience) = args.patience {
        config.train.patience = patience;
    }
    if let Some(lr) = args.lr {
        config.train.learning_rate = lr;
    }
    if let Some(d) = args.embed_dim {
        config.model.embed_dim = d;
    }
    if let Some(h) = args.heads {
        config.model.heads = h;
    }
    if let Some(l) = args.layers {
        config.model.layers = l;
    }
    if args.geo {
        config.split.geo_edges = true;
    }
    // Geo edges are only useful if the encoder also message-passes over them.
    if config.split.geo_edges
        && !config
            .model
            .edge_types
            .contains(&crate::graph::EdgeType::Geo)
    {
        config.model.edge_types.push(crate::graph::EdgeType::Geo);
    }

    apply_env_seed(&mut config)?;
    let data = load_data(&args.data)?;
    let split = load_split(
        &args.data,
        args.split.as_deref(),
        &data.flows,
        config.split.seed,
    )?;
    let graph = training_graph(&data, &split, None, config.split.geo_edges)?;
    let standardization = graph
        .indicators
        .stats
        .clone()
        .expect("training graph carries standardization");

    let out = args.out.unwrap_or_else(|| args.data.clone());
    ensure_dir(&out)?;
    let (params, history) = train(&graph, &split, &config.model, &config.train, |row| {
        println!(
            "epoch={} loss={} val_rmse={}",
            row.epoch, row.loss_total, row.val_rmse_weighted
        );
    })?;

    io::write_history(&out.join(HISTORY_FILE), &history.rows)?;
    let manifest = ModelManifest {
        model_config: config.model.clone(),
        train_config: config.train.clone(),
        n_city: graph.n_city,
        feature_dim: graph.indicators.feature_count(),
        standardization,
    };
    let section = checkpoint::model_section(&params, &manifest)?;
    checkpoint::save(&out.join(CHECKPOINT_FILE), &[section])?;
    println!(
        "trained epochs={} best_epoch={} checkpoint={}",
        history.rows.len(),
        history.best_epoch,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn records_of_set<'a>(split: &'a EdgeSplit, set: &str) -> Result<Vec<FlowRecord>> {
    let bucket: &'a PerTask<Vec<FlowRecord>> = match set {
        "train" => &split.train,
        "val" => &split.val,
        "test" => &split.test,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown set {other:?} (expected train, val, or test)"
            )))
        }
    };
    Ok(FlowKind::ALL
        .iter()
        .flat_map(|k| bucket.get(*k).clone())
        .collect())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    set: String,
    tasks: PerTask<Option<MetricsReport>>,
}

fn print_task_blocks(report: &PerTask<Option<MetricsReport>>) {
    for (kind, metrics) in report.iter() {
        println!("[{}]", kind.as_str());
        match metrics {
            Some(m) => {
                println!("n={}", m.n);
                println!("rmse={}", m.rmse);
                println!("mae={}", m.mae);
                println!("pcc={}", m.pcc);
                println!("degenerate_pcc={}", m.degenerate_pcc);
            }
            None => {
                println!("n=0");
                println!("absent=true");
            }
        }
    }
}

fn evaluate_cmd(args: EvaluateArgs, config: RunConfig) -> Result<()> {
    let data = load_data(&args.data)?;
    let sections = checkpoint::load(&args.checkpoint)?;
    let (params, manifest) = checkpoint::model_from_section(checkpoint::find_section(
        &sections,
        checkpoint::MODEL_SECTION,
    )?)?;
    let split = load_split(
        &args.data,
        args.split.as_deref(),
        &data.flows,
        config.split.seed,
    )?;
    let graph = training_graph(
        &data,
        &split,
        Some(&manifest.standardization),
        config.split.geo_edges || graph_has_geo(&manifest.model_config),
    )?;
    let records = records_of_set(&split, &args.set)?;
    let report = evaluate_model(
        &params,
        &graph,
        &records,
        manifest.train_config.log1p_targets,
    )?;
    print_task_blocks(&report);
    let out = args
        .report
        .unwrap_or_else(|| args.data.join(EVAL_REPORT_FILE));
    write_json(
        &out,
        &EvalReport {
            set: args.set,
            tasks: report,
        },
    )?;
    Ok(())
}

fn graph_has_geo(config: &ModelConfig) -> bool {
    config.edge_types.contains(&crate::graph::EdgeType::Geo)
}

fn explain_cmd(args: ExplainArgs, config: RunConfig, workers: usize) -> Result<()> {
    let data = load_data(&args.data)?;
    let sections = checkpoint::load(&args.checkpoint)?;
    let (params, manifest) = checkpoint::model_from_section(checkpoint::find_section(
        &sections,
        checkpoint::MODEL_SECTION,
    )?)?;
    let split = load_split(
        &args.data,
        args.split.as_deref(),
        &data.flows,
        config.split.seed,
    )?;
    let graph = training_graph(
        &data,
        &split,
        Some(&manifest.standardization),
        config.split.geo_edges || graph_has_geo(&manifest.model_config),
    )?;

    let mut request = AttributionRequest::new(UnitId::city(args.city));
    if let Some(k) = args.k {
        request.k = k;
    }
    if let Some(steps) = args.steps {
        request.steps = steps;
    }
    let report = regional_summary(&params, &graph, &split, &request, workers)?;
    let out = args.out.unwrap_or_else(|| args.data.join(ATTRIBUTION_FILE));
    std::fs::write(&out, report.to_csv()).map_err(|source| Error::Io {
        path: out.display().to_string(),
        source,
    })?;
    print!("{report}");
    println!("attribution_csv={}", out.display());
    Ok(())
}

fn gravity_train_cmd(args: GravityTrainArgs, mut config: RunConfig) -> Result<()> {
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.train.max_epochs = epochs;
    }
    if let Some(lr) = args.lr {
        config.train.learning_rate = lr;
    }
    if args.tie_weights {
        config.gravity.tie_weights = true;
    }

    apply_env_seed(&mut config)?;
    let data = load_data(&args.data)?;
    let split = load_split(
        &args.data,
        args.split.as_deref(),
        &data.flows,
        config.split.seed,
    )?;
    let graph = training_graph(&data, &split, None, config.split.geo_edges)?;
    let inputs = GravityInputs::from_graph(&graph)?;
    let val_records = records_of_set(&split, "val")?;
    let params = train_gravity(
        &split.train_records(),
        &val_records,
        &inputs,
        &config.train,
        config.gravity.tie_weights,
    )?;

    let out = args.out.unwrap_or_else(|| args.data.clone());
    ensure_dir(&out)?;
    let manifest = GravityManifest {
        train_config: config.train.clone(),
        tied: params.tied(),
        norm: params.norm,
    };
    let section = checkpoint::gravity_section(&params, &manifest)?;
    checkpoint::save(&out.join(GRAVITY_CHECKPOINT_FILE), &[section])?;
    println!(
        "gravity checkpoint={}",
        out.join(GRAVITY_CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn gravity_evaluate_cmd(args: GravityEvaluateArgs, config: RunConfig) -> Result<()> {
    let data = load_data(&args.data)?;
    let sections = checkpoint::load(&args.checkpoint)?;
    let (params, _manifest) = checkpoint::gravity_from_section(checkpoint::find_section(
        &sections,
        checkpoint::GRAVITY_SECTION,
    )?)?;
    let split = load_split(
        &args.data,
        args.split.as_deref(),
        &data.flows,
        config.split.seed,
    )?;
    let graph = training_graph(&data, &split, None, config.split.geo_edges)?;
    let inputs = GravityInputs::from_graph(&graph)?;
    let records = records_of_set(&split, &args.set)?;
    let report = evaluate_gravity(&params, &inputs, &records)?;
    print_task_blocks(&report);
    let out = args
        .report
        .unwrap_or_else(|| args.data.join(EVAL_REPORT_FILE));
    write_json(
        &out,
        &EvalReport {
            set: args.set,
            tasks: report,
        },
    )?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidConfig(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}
