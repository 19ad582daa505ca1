//! Pipeline orchestration: every stage as a subcommand, plus an end-to-end
//! toy demo. Exit codes: 0 ok, 2 validation, 3 data/format, 4 contract
//! mismatch, 5 internal.

pub mod commands;
pub mod config;
pub mod demo;
pub mod report;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CONTRACT: i32 = 4;
pub const EXIT_INTERNAL: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub stage: &'static str,
    pub exit_code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.message)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn validation(stage: &'static str, message: impl Into<String>) -> Self {
        Self {
            stage,
            exit_code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    pub fn data(stage: &'static str, message: impl Into<String>) -> Self {
        Self {
            stage,
            exit_code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn contract(stage: &'static str, message: impl Into<String>) -> Self {
        Self {
            stage,
            exit_code: EXIT_CONTRACT,
            message: message.into(),
        }
    }

    pub fn internal(stage: &'static str, message: impl Into<String>) -> Self {
        Self {
            stage,
            exit_code: EXIT_INTERNAL,
            message: message.into(),
        }
    }

    pub fn io(stage: &'static str, path: &std::path::Path, e: std::io::Error) -> Self {
        Self::data(stage, format!("{}: {e}", path.display()))
    }
}

/// Exit-code classification for library errors.
pub trait ErrorClass {
    fn exit_code(&self) -> i32;
}

impl ErrorClass for unibridge_core::CorpusError {
    fn exit_code(&self) -> i32 {
        EXIT_DATA
    }
}

impl ErrorClass for unibridge_core::TokenizerError {
    fn exit_code(&self) -> i32 {
        use unibridge_core::TokenizerError::*;
        match self {
            RequestedSizeTooSmall { .. } => EXIT_VALIDATION,
            _ => EXIT_DATA,
        }
    }
}

impl ErrorClass for unibridge_core::VocabSearchError {
    fn exit_code(&self) -> i32 {
        use unibridge_core::VocabSearchError::*;
        match self {
            InvalidConfig(_) | NoThresholds => EXIT_VALIDATION,
            TrainingFailed { source, .. } => source.exit_code(),
        }
    }
}

impl ErrorClass for unibridge_core::StaticEmbedError {
    fn exit_code(&self) -> i32 {
        use unibridge_core::StaticEmbedError::*;
        match self {
            BadDim(_) => EXIT_VALIDATION,
            ZeroNorm | DimMismatch { .. } => EXIT_CONTRACT,
            _ => EXIT_DATA,
        }
    }
}

impl ErrorClass for unibridge_core::EmbedInitError {
    fn exit_code(&self) -> i32 {
        use unibridge_core::EmbedInitError::*;
        match self {
            // the embedding stage reports dimension trouble as a data error
            StaticDimMismatch { .. } => EXIT_DATA,
            RowCountMismatch { .. } | MissingSpecials { .. } => EXIT_CONTRACT,
        }
    }
}

impl ErrorClass for unibridge_core::ObjectiveError {
    fn exit_code(&self) -> i32 {
        use unibridge_core::ObjectiveError::*;
        match self {
            BadMaskProb(_) | BadBeta(_) | EmptySequence => EXIT_VALIDATION,
            NonFinite { .. } => EXIT_DATA,
            NoPositionSelected => EXIT_INTERNAL,
            _ => EXIT_CONTRACT,
        }
    }
}

impl ErrorClass for unibridge_core::FusionError {
    fn exit_code(&self) -> i32 {
        use unibridge_core::FusionError::*;
        match self {
            NoSources => EXIT_VALIDATION,
            EmptySet | NonFinite { .. } | Sidecar { .. } | File(_) => EXIT_DATA,
            _ => EXIT_CONTRACT,
        }
    }
}

/// Wrap a library error with its stage tag.
pub fn stage_err<E: ErrorClass + fmt::Display>(stage: &'static str) -> impl Fn(E) -> CliError {
    move |e| CliError {
        stage,
        exit_code: e.exit_code(),
        message: e.to_string(),
    }
}

/// Worker-thread cap: `UNIBRIDGE_THREADS` if set, otherwise the machine's
/// available parallelism.
pub fn thread_cap() -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    match std::env::var("UNIBRIDGE_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .map_or(available, |n| n.min(available)),
        Err(_) => available,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "unibridge",
    version,
    about = "Bootstrap the lexical layer of a multilingual model for a new language"
)]
pub struct Cli {
    /// TOML config file; command-line flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic choice
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize newline-delimited text (or a two-column TSV with --parallel)
    Ingest {
        /// Input text files, read in order
        files: Vec<PathBuf>,
        #[arg(long)]
        lang: Option<String>,
        /// Normalized output (one sentence per line, or TSV for --parallel)
        #[arg(long)]
        out: PathBuf,
        /// Also write a JSON manifest with counts and a content hash
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Keep at most this many sentences
        #[arg(long)]
        limit: Option<usize>,
        /// Treat this file as tab-separated target/source pairs
        #[arg(long)]
        parallel: Option<PathBuf>,
        #[arg(long)]
        target_lang: Option<String>,
        #[arg(long)]
        source_lang: Option<String>,
        /// Number of parallel pairs to keep
        #[arg(short = 'k', long)]
        pairs: Option<usize>,
    },
    /// Search for a vocabulary size by the ALP stopping rule
    Search {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Where to write the chosen tokenizer (TSV)
        #[arg(long)]
        out_tokenizer: Option<PathBuf>,
        /// Where to write the trace (JSON); holds the sweep report when
        /// --thresholds is given
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Also write the trace as CSV (size,alp,delta)
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Run one search per threshold and write a sweep report
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long)]
        initial_size: Option<usize>,
        #[arg(long)]
        max_size: Option<usize>,
        #[arg(long)]
        step: Option<usize>,
        #[arg(long)]
        stop_threshold: Option<f64>,
        /// Score with recounted corpus frequencies instead of EM estimates
        #[arg(long)]
        recounted_probs: bool,
    },
    /// Train static embeddings on a tokenized corpus
    TrainStatic {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        negatives: Option<usize>,
        #[arg(long)]
        min_count: Option<u64>,
    },
    /// Build the target embedding matrix from source embeddings
    InitEmbedding {
        #[arg(long)]
        target_tokenizer: Option<PathBuf>,
        #[arg(long)]
        source_tokenizer: Option<PathBuf>,
        /// Source model embedding (UBEM binary or `token v1..vd` text)
        #[arg(long)]
        source_embedding: Option<PathBuf>,
        #[arg(long)]
        target_static: Option<PathBuf>,
        #[arg(long)]
        source_static: Option<PathBuf>,
        /// Train both static embeddings on --corpus instead of loading them
        #[arg(long)]
        train_static: bool,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Target embedding output (UBEM)
        #[arg(long)]
        out: PathBuf,
        /// Alignment-plan JSON output
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Human-readable similar-token report
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        block_size: Option<usize>,
    },
    /// Evaluate the loss functions on supplied inputs, or run self-checks
    LossesCheck {
        /// JSON file with logits/targets/hidden states/beta
        #[arg(long)]
        inputs: Option<PathBuf>,
    },
    /// Compute harmony weights and optionally fuse per-source logits
    Fuse {
        /// Target hidden-state file (UBHS + sidecar)
        #[arg(long)]
        target: PathBuf,
        /// Source hidden-state files
        #[arg(long, num_args = 1..)]
        sources: Vec<PathBuf>,
        /// Fusion report JSON
        #[arg(long)]
        out: PathBuf,
        /// Per-source logits JSON (lang -> array)
        #[arg(long)]
        logits: Option<PathBuf>,
        /// Fused logits output (requires --logits)
        #[arg(long)]
        fused_out: Option<PathBuf>,
    },
    /// Run the end-to-end toy pipeline on synthetic two-language data
    Demo {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        beta: Option<f64>,
        /// Gradient steps for the toy masked-LM fit
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Render trace/plan/fusion artifacts as human-readable text
    Report {
        /// A search trace or sweep report JSON
        #[arg(long)]
        trace: Option<PathBuf>,
        /// An alignment-plan JSON
        #[arg(long)]
        plan: Option<PathBuf>,
        /// A fusion report JSON
        #[arg(long)]
        fusion: Option<PathBuf>,
        /// Also write the trace as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::PipelineConfig::load_or_default(cli.config.as_ref())?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    match cli.command {
        Command::Ingest {
            files,
            lang,
            out,
            manifest,
            limit,
            parallel,
            target_lang,
            source_lang,
            pairs,
        } => commands::ingest(
            &cfg, files, lang, out, manifest, limit, parallel, target_lang, source_lang, pairs,
        ),
        Command::Search {
            corpus,
            out_tokenizer,
            trace,
            csv,
            thresholds,
            initial_size,
            max_size,
            step,
            stop_threshold,
            recounted_probs,
        } => {
            let mut block = cfg.search.clone();
            if let Some(v) = initial_size {
                block.initial_size = v;
            }
            if let Some(v) = max_size {
                block.max_size = v;
            }
            if let Some(v) = step {
                block.step = v;
            }
            if let Some(v) = stop_threshold {
                block.stop_threshold = v;
            }
            block.recounted_probs |= recounted_probs;
            commands::search(&cfg, &block, corpus, out_tokenizer, trace, csv, thresholds, seed)
        }
        Command::TrainStatic {
            corpus,
            tokenizer,
            out,
            dim,
            epochs,
            window,
            negatives,
            min_count,
        } => {
            let mut block = cfg.static_embed.clone();
            if let Some(v) = dim {
                block.dim = v;
            }
            if let Some(v) = epochs {
                block.epochs = v;
            }
            if let Some(v) = window {
                block.window = v;
            }
            if let Some(v) = negatives {
                block.negatives = v;
            }
            if let Some(v) = min_count {
                block.min_count = v;
            }
            commands::train_static(&cfg, &block, corpus, tokenizer, out, seed)
        }
        Command::InitEmbedding {
            target_tokenizer,
            source_tokenizer,
            source_embedding,
            target_static,
            source_static,
            train_static,
            corpus,
            out,
            plan,
            report,
            block_size,
        } => commands::init_embedding(commands::InitEmbeddingArgs {
            cfg: &cfg,
            target_tokenizer,
            source_tokenizer,
            source_embedding,
            target_static,
            source_static,
            train_static,
            corpus,
            out,
            plan,
            report,
            block_size,
            seed,
        }),
        Command::LossesCheck { inputs } => commands::losses_check(inputs, seed),
        Command::Fuse {
            target,
            sources,
            out,
            logits,
            fused_out,
        } => commands::fuse(target, sources, out, logits, fused_out),
        Command::Demo {
            out_dir,
            beta,
            steps,
        } => {
            let beta = beta.unwrap_or(cfg.objective.beta);
            let steps = steps.unwrap_or(200);
            demo::run_demo(&out_dir, seed, beta, steps).map(|outcome| {
                println!(
                    "demo complete: total loss {:.4} -> {:.4}, summary {}",
                    outcome.first_total,
                    outcome.last_total,
                    outcome.summary_path.display()
                );
            })
        }
        Command::Report {
            trace,
            plan,
            fusion,
            csv,
        } => report::render(trace, plan, fusion, csv),
    }
}
