//! Command-line driver: argument definitions, run configuration and
//! subcommand bodies. The `stem` binary is a thin wrapper over [`execute`].

pub mod commands;
pub mod config;
pub mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "stem",
    version,
    about = "Token-indexed FFN tables: training, evaluation and analysis"
)]
pub struct Cli {
    /// Directory under which each invocation creates a fresh run directory.
    #[arg(long, global = true, env = "STEM_OUTPUT_ROOT", default_value = "runs")]
    pub out_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a JSON run configuration.
    Train(TrainArgs),
    /// Held-out perplexity and needle retrieval for a trained run.
    Eval(EvalArgs),
    /// Address-vector cosine histograms and vocabulary growth for a trained run.
    Analyze(AnalyzeArgs),
    /// Swap token rows in a prompt and compare next-token predictions.
    Edit(EditArgs),
    /// Cache and transfer simulation of table offloading on a Zipf stream.
    Simulate(SimulateArgs),
    /// Analytic FLOP, memory and communication report for one layer shape.
    Cost(CostArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides train.steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides model.seed.
    #[arg(long)]
    pub model_seed: Option<u64>,
    /// Overrides train.peak_lr.
    #[arg(long)]
    pub peak_lr: Option<f64>,
    /// Overrides train.batch_size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Overrides train.seq_len.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Overrides train.checkpoint_every.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Directory of a completed `train` run.
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint to load instead of the run's final one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Needle-retrieval context lengths; defaults to 128,256,512 capped at model.max_len.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Vec<usize>,
    /// Instances per length.
    #[arg(long, default_value_t = 20)]
    pub per_length: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Pairs sampled per histogram (all pairs when there are fewer).
    #[arg(long, default_value_t = stem_core::analysis::DEFAULT_SAMPLE_PAIRS)]
    pub pairs: usize,
    /// Table rows of tokens seen fewer times in training are left out.
    #[arg(long, default_value_t = 10)]
    pub min_count: usize,
    /// Held-out sequences used for dense address vectors.
    #[arg(long, default_value_t = 8)]
    pub heldout_sequences: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    EqualSwap,
    PadLeft,
    PadRight,
    Copy,
    Subset,
    Average,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Prompt text; the edit applies where the source tokens occur.
    #[arg(long)]
    pub prompt: String,
    /// Source token string, as it appears in the prompt.
    #[arg(long)]
    pub source: String,
    /// Replacement token string.
    #[arg(long)]
    pub target: String,
    #[arg(long, value_enum, default_value = "equal-swap")]
    pub scheme: SchemeArg,
    /// Target indices kept by the subset scheme.
    #[arg(long, value_delimiter = ',')]
    pub subset: Vec<usize>,
    /// Table layers to edit; all by default.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Also write a checkpoint with the edit folded into the tables.
    #[arg(long)]
    pub materialize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimMode {
    Decode,
    Prefill,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "decode")]
    pub mode: SimMode,
    /// Vocabulary size V of the Zipf source.
    #[arg(long, default_value_t = 50_000)]
    pub vocab: usize,
    /// Zipf exponent s.
    #[arg(long, default_value_t = 1.0)]
    pub zipf_s: f64,
    /// Number of tokens drawn.
    #[arg(long, default_value_t = 1_000_000)]
    pub tokens: usize,
    /// Cache capacity in rows.
    #[arg(long, default_value_t = 5_000)]
    pub capacity: usize,
    /// Model depth.
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    /// Table layers; all layers by default.
    #[arg(long, value_delimiter = ',')]
    pub stem_layers: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 1.0)]
    pub host_latency: f64,
    /// Elements per time unit.
    #[arg(long, default_value_t = 1.0e3)]
    pub host_bandwidth: f64,
    #[arg(long, default_value_t = 1.0)]
    pub layer_compute_time: f64,
    /// Tokens per prefill pass.
    #[arg(long, default_value_t = 512)]
    pub prefill_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Public Qwen2.5 size (1.5B, 3B, 7B, 14B, 32B); sets d and d_ff.
    #[arg(long)]
    pub qwen: Option<String>,
    #[arg(long)]
    pub d: Option<u64>,
    #[arg(long)]
    pub d_ff: Option<u64>,
    #[arg(long, default_value_t = stem_core::cost_model::QWEN_CONTEXT)]
    pub seq_len: u64,
    #[arg(long, default_value_t = 1)]
    pub batch: u64,
    #[arg(long, default_value_t = 151_936)]
    pub vocab: u64,
    #[arg(long, default_value_t = 2)]
    pub bytes_per_element: u64,
}

pub fn execute(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Train(a) => commands::train(&cli.out_root, a),
        Command::Eval(a) => commands::eval(&cli.out_root, a),
        Command::Analyze(a) => commands::analyze(&cli.out_root, a),
        Command::Edit(a) => commands::edit(&cli.out_root, a),
        Command::Simulate(a) => commands::simulate(&cli.out_root, a),
        Command::Cost(a) => commands::cost(&cli.out_root, a),
    };
    match result {
        Ok(dir) => {
            eprintln!("run directory: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let category = crate::run::categorize(&e);
            eprintln!("{}: {e:#}", category.name());
            ExitCode::from(category.code() as u8)
        }
    }
}
