mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

const ARTIFACT_DEFAULTS: &str = "\
Preset hyperparameters marked [artifact default] are choices of this tool
rather than published values: similarity top-k 8, 4 global tokens, 4 random
reads, 4 compressed memory tokens, and a single memory layer at
round(0.72 * layers) for memtrans and unimix. Each can be overridden with the
matching flag or [memory] key.";

#[derive(Parser)]
#[command(name = "unimem", version, about = "Train and compare memory-augmented transformer configurations")]
#[command(after_help = ARTIFACT_DEFAULTS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration; writes checkpoint.bin, config.toml and train_log.csv.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one configuration; writes comparison.csv and nll_series.csv.
    ///
    /// Without --checkpoint the configuration is trained first.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Parameters written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate several presets under identical data, seed and budget.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated preset names [default: all presets].
        #[arg(long, value_delimiter = ',')]
        presets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the memory injection layer: each single layer, no layer, all layers.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write every mask builder's output as CSV and PGM.
    MaskDump {
        #[command(flatten)]
        dims: MaskDims,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the preset table for a model shape.
    PresetList {
        /// Read the model shape from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write presets.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting memory preset (vanilla, transformer_xl, memtrans, rmt, longformer, bigbird, unimix).
    #[arg(long)]
    pub preset: Option<String>,
    /// Training seed; also seeds parameter initialization.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Similarity-read top-k [artifact default: 8].
    #[arg(long)]
    pub topk: Option<usize>,
    /// Position-read window in tokens [default: segment length].
    #[arg(long)]
    pub window: Option<usize>,
    /// Position-read global tokens [artifact default: 4 for longformer and bigbird].
    #[arg(long)]
    pub globals: Option<usize>,
    /// Memory layers: `all`, `none` or indices such as `0,2` [artifact default: round(0.72 * layers) for memtrans and unimix].
    #[arg(long)]
    pub mem_layers: Option<String>,
    /// Cache capacity in entries.
    #[arg(long)]
    pub capacity: Option<usize>,
    #[arg(long, value_parser = ["fifo", "clear_all"])]
    pub overflow: Option<String>,
    /// Comma-separated write modes: direct, pooling, model_forward.
    #[arg(long)]
    pub write_mode: Option<String>,
    /// Model-forward memory tokens [artifact default: 4].
    #[arg(long)]
    pub compressed_tokens: Option<usize>,
}

#[derive(Args, Clone, Debug)]
pub struct DataArgs {
    /// Byte-level training corpus; the last tenth is held out for evaluation.
    #[arg(long, required_unless_present = "recall", conflicts_with = "recall")]
    pub corpus: Option<PathBuf>,
    /// Use the synthetic key-value recall task instead of a corpus.
    #[arg(long)]
    pub recall: bool,
    /// Recall evaluation samples per distance bucket.
    #[arg(long, default_value_t = 64)]
    pub eval_samples: usize,
}

#[derive(Args, Clone, Debug)]
pub struct MaskDims {
    /// Segment length L.
    #[arg(long, default_value_t = 4)]
    pub segment_len: usize,
    /// Memory length M.
    #[arg(long, default_value_t = 4)]
    pub memory_len: usize,
    /// Window W [default: segment length].
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub globals: usize,
    #[arg(long, default_value_t = 2)]
    pub random: usize,
    /// Memory tokens for the recurrent-memory mask.
    #[arg(long, default_value_t = 2)]
    pub memory_tokens: usize,
    /// Selections per query for the kNN mask.
    #[arg(long, default_value_t = 2)]
    pub topk: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
