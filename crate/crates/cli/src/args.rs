use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "hyperrag", version, about = "Gated multimodal retrieval with hyperbolic alignment")]
pub struct Cli {
    /// Pipeline configuration (TOML, or JSON when the extension is .json).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for artifacts and traces.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Bundle directory; defaults to `<out>/bundle`.
    #[arg(long, global = true)]
    pub bundle: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted synthetic bundle.
    Synth(SynthArgs),
    /// Embedding alignment.
    #[command(subcommand)]
    Align(AlignCommand),
    /// Relevance gate.
    #[command(subcommand)]
    Crm(CrmCommand),
    /// Refine the knowledge graph for one query.
    Refine(RefineArgs),
    /// Check the Cheeger inequality on a graph.
    Cheeger {
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Generator alone.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Both training phases end to end.
    TrainAll,
    /// Answer one query with trained components.
    Answer {
        #[arg(long)]
        query_id: String,
    },
    /// Evaluate trained components on the bundle.
    Eval,
    /// Latency of the pipeline stages and core kernels.
    Bench {
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Oracle cross-checks.
    #[command(subcommand)]
    Conformance(ConformanceCommand),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub graph_size: Option<usize>,
    /// Fraction of distractor items.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub answerable: Option<f64>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum AlignCommand {
    Train(AlignTrainArgs),
    Retrieve {
        #[arg(long)]
        query_id: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Debug, Args)]
pub struct AlignTrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub positives: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Full-batch steps with backtracking.
    #[arg(long)]
    pub line_search: bool,
}

#[derive(Debug, Subcommand)]
pub enum CrmCommand {
    Train {
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        gating: Option<PathBuf>,
        #[arg(long)]
        hidden: Option<usize>,
    },
    Gate {
        #[arg(long)]
        query_id: String,
    },
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub query_id: String,
    #[arg(long)]
    pub eta_frac: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum GenCommand {
    Train {
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long = "dropout-T")]
        dropout_t: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    Eval {
        #[arg(long)]
        exact_ot_max: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ConformanceCommand {
    Run {
        /// Only modules whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
}
