//! `jule` — cluster feature vectors by greedy merging on a directed KNN
//! affinity graph, optionally alternating merges with triplet training of a
//! small embedding network.
//!
//! Subcommands: `cluster` (merges only), `jule` (the alternating loop),
//! `alpha-bench` (approximate-update sweep), `viz` (2-d/3-d projection
//! head), `eval` (score one labeling against another). Every run writes a
//! `report.json` with a stable schema and echoes it to stdout; seeded runs
//! are byte-reproducible apart from the `timings_ms` block.

mod commands;
mod data;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use jule_core::affinity::AffinityMode;
use jule_core::dataset::Dataset;
use jule_core::driver::JuleConfig;
use jule_core::embedding::SolverParams;

use data::DataSpec;

/// Errors surfaced to the shell: usage problems exit 2, everything else
/// exits 1.
#[derive(Debug)]
pub enum AppError {
    Usage(String),
    Runtime(String),
}

impl From<jule_core::Error> for AppError {
    fn from(e: jule_core::Error) -> Self {
        match e {
            // Out-of-domain settings are flag problems, reported as usage
            // errors; data, graph, and I/O failures are runtime errors.
            jule_core::Error::Config(msg) => AppError::Usage(msg),
            other => AppError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "jule",
    version,
    about = "Agglomerative clustering on directed KNN affinity graphs, \
             with optional joint embedding learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster raw features by greedy agglomerative merging
    Cluster(ClusterArgs),
    /// Alternate agglomerative merging with embedding training
    Jule(JuleArgs),
    /// Compare approximate merge updates against exact mode
    AlphaBench(AlphaBenchArgs),
    /// Train an unnormalized 2-d/3-d projection for plotting
    Viz(VizArgs),
    /// Score a predicted labeling against a reference labeling
    Eval(EvalArgs),
}

/// Flags shared by every data-consuming subcommand.
#[derive(Args)]
pub struct CommonArgs {
    /// Dataset URI: idx:images[,labels] | csv:path[:labelcol] |
    /// blobs:k=..,n=..,d=..[,seed=..][,spread=..][,sep=..]
    #[arg(long)]
    pub data: String,

    /// Directory that receives report.json and all other artifacts
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,

    /// Threads for data-parallel sections (default: all cores)
    #[arg(long)]
    pub threads: Option<usize>,

    /// Seed for network init, shuffling, and triplet draws
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl CommonArgs {
    pub(crate) fn load_data(&self) -> jule_core::Result<Dataset> {
        // The URI was already parsed during flag validation; re-parse is
        // cheap and keeps this helper self-contained.
        let spec = DataSpec::parse(&self.data).expect("URI validated at startup");
        match spec.load() {
            Ok(ds) => Ok(ds),
            Err(AppError::Runtime(msg)) | Err(AppError::Usage(msg)) => {
                Err(jule_core::Error::Format(msg))
            }
        }
    }
}

/// Affinity-graph and merge-loss flags.
#[derive(Args)]
pub struct GraphArgs {
    /// Neighbours per sample in the affinity graph
    #[arg(long, default_value_t = 20)]
    pub ks: usize,

    /// Scale of the Gaussian kernel bandwidth
    #[arg(long, default_value_t = 1.0)]
    pub a: f64,

    /// Neighbour clusters weighed by the merge loss
    #[arg(long, default_value_t = 5)]
    pub kc: usize,

    /// Weight of the separation term in the merge loss
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
}

/// Choice between exact and approximate affinity bookkeeping.
#[derive(Args)]
pub struct ModeArgs {
    /// Affinity bookkeeping across merges
    #[arg(long, value_enum, default_value = "exact")]
    pub mode: ModeArg,

    /// Size-weight coefficient for approximate updates
    /// (requires --mode approx; defaults to 0 there)
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
pub enum ModeArg {
    /// Recompute merged-cluster affinities from the graph
    Exact,
    /// Size-weighted constant-ratio update
    Approx,
}

impl ModeArgs {
    pub(crate) fn to_mode(&self) -> Result<AffinityMode, AppError> {
        match (self.mode, self.alpha) {
            (ModeArg::Exact, None) => Ok(AffinityMode::Exact),
            (ModeArg::Exact, Some(_)) => Err(AppError::Usage(
                "--alpha only applies to --mode approx".into(),
            )),
            (ModeArg::Approx, alpha) => Ok(AffinityMode::Approximate {
                alpha: alpha.unwrap_or(0.0),
            }),
        }
    }
}

/// Embedding-training flags.
#[derive(Args)]
pub struct TrainArgs {
    /// Positive-pair weight in the triplet hinge
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,

    /// Triplet hinge margin
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,

    /// Fraction of live clusters merged per period
    #[arg(long, default_value_t = 0.9)]
    pub eta: f64,

    /// Training epochs per period
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,

    /// Training batch size
    #[arg(long, default_value_t = 128)]
    pub batch: usize,

    /// Embedder layer widths after the input layer, comma separated
    #[arg(long, value_delimiter = ',', default_value = "160")]
    pub dims: Vec<usize>,

    /// Base learning rate
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,

    /// Momentum coefficient
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,

    /// L2 penalty added to every gradient
    #[arg(long, default_value_t = 5e-5)]
    pub weight_decay: f64,

    /// Inverse-decay scale of the learning-rate schedule
    #[arg(long, default_value_t = 1e-4)]
    pub lr_gamma: f64,

    /// Inverse-decay exponent of the learning-rate schedule
    #[arg(long, default_value_t = 0.75)]
    pub lr_power: f64,
}

/// Builds the run configuration shared by `jule` and `viz`.
fn build_config(
    common: &CommonArgs,
    graph: &GraphArgs,
    mode: &ModeArgs,
    train: &TrainArgs,
    target_nc: usize,
) -> Result<JuleConfig, AppError> {
    let mut config = JuleConfig::new(target_nc);
    config.ks = graph.ks;
    config.a = graph.a;
    config.kc = graph.kc;
    config.lambda = graph.lambda;
    config.gamma = train.gamma;
    config.margin = train.margin;
    config.eta = train.eta;
    config.epochs_per_period = train.epochs;
    config.batch_size = train.batch;
    config.embed_dims = train.dims.clone();
    config.seed = common.seed;
    config.affinity_mode = mode.to_mode()?;
    config.solver = SolverParams {
        base_lr: train.lr,
        momentum: train.momentum,
        weight_decay: train.weight_decay,
        lr_gamma: train.lr_gamma,
        lr_power: train.lr_power,
    };
    config.validate()?;
    Ok(config)
}

#[derive(Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[command(flatten)]
    pub mode: ModeArgs,
    /// Cluster count to stop at
    #[arg(long)]
    pub target_nc: usize,
    /// Scale every sample to unit Euclidean norm first (the joint loop
    /// always does; here it is opt-in)
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Args)]
pub struct JuleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[command(flatten)]
    pub mode: ModeArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Cluster count to stop at
    #[arg(long)]
    pub target_nc: usize,
    /// Also re-cluster the final learned representation from scratch
    #[arg(long)]
    pub rc: bool,
}

impl JuleArgs {
    pub(crate) fn to_config(&self) -> Result<JuleConfig, AppError> {
        build_config(
            &self.common,
            &self.graph,
            &self.mode,
            &self.train,
            self.target_nc,
        )
    }
}

#[derive(Args)]
pub struct AlphaBenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Cluster count to stop at
    #[arg(long)]
    pub target_nc: usize,
    /// Approximation coefficients to sweep (exact mode always runs first)
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "-0.2,-0.1,0,0.1,0.2,0.3,0.5"
    )]
    pub alphas: Vec<f64>,
    /// Scale every sample to unit Euclidean norm first
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Args)]
pub struct VizArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[command(flatten)]
    pub mode: ModeArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Cluster count to stop at
    #[arg(long)]
    pub target_nc: usize,
    /// Width of the projection written for plotting
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(2..=3))]
    pub out_dim: u64,
}

impl VizArgs {
    pub(crate) fn to_config(&self) -> Result<JuleConfig, AppError> {
        build_config(
            &self.common,
            &self.graph,
            &self.mode,
            &self.train,
            self.target_nc,
        )
    }
}

#[derive(Args)]
pub struct EvalArgs {
    /// Predicted labeling: sample,cluster CSV or one label per line
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference labeling in the same formats
    #[arg(long)]
    pub truth: PathBuf,
    /// Directory that receives report.json
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

fn validate_common(common: &CommonArgs) -> Result<(), AppError> {
    DataSpec::parse(&common.data)?;
    if let Some(threads) = common.threads {
        if threads == 0 {
            return Err(AppError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| AppError::Runtime(format!("thread pool setup failed: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), AppError> {
    match &cli.command {
        Command::Cluster(args) => {
            validate_common(&args.common)?;
            args.mode.to_mode()?;
            commands::cmd_cluster(args)?;
        }
        Command::Jule(args) => {
            validate_common(&args.common)?;
            args.to_config()?;
            commands::cmd_jule(args)?;
        }
        Command::AlphaBench(args) => {
            validate_common(&args.common)?;
            commands::cmd_alpha_bench(args)?;
        }
        Command::Viz(args) => {
            validate_common(&args.common)?;
            args.to_config()?;
            commands::cmd_viz(args)?;
        }
        Command::Eval(args) => {
            commands::cmd_eval(args)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap itself exits 2 on bad flags and 0 on --help/--version.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
