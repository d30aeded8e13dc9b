//! `spark`: command-line front end of the fault-localization pipeline.
//!
//! Exit codes: 0 on success, 1 when a command ran but some items or queries
//! failed, 2 on usage or configuration errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use spark_core::{HeuristicTokenizer, NgramHashEmbedder, Tokenizer, PIPELINE_ID};

use config::FileConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs detected before any work.
    Usage(String),
    /// The command ran into an error.
    Failed(String),
    /// The command finished but some items failed; details already printed.
    Partial(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) | CliError::Partial(_) => 1,
        }
    }
}

impl From<spark_core::Error> for CliError {
    fn from(e: spark_core::Error) -> Self {
        match e.root() {
            spark_core::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "spark", about = "Retrieval-augmented fault localization for test scripts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Preprocess raw test cases into a corpus file.
    Ingest {
        /// Directory of `*.json` test cases, or a JSONL file.
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Label a corpus by diffing against repaired versions.
    Label {
        #[arg(long)]
        corpus: PathBuf,
        /// Directory of `*.json` `{id, lines}` files, or a JSONL file.
        #[arg(long)]
        repaired: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Remove the cases flagged as outliers.
        #[arg(long)]
        drop_outliers: bool,
        /// Where to write the outlier report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Embed every corpus case into a sidecar file.
    Index {
        #[command(flatten)]
        common: CommonArgs,
        /// Replace an existing sidecar even if its dimension differs.
        #[arg(long)]
        force: bool,
    },
    /// Localize the fault of one failing test.
    Localize {
        /// JSON test case (`id`, `lines`, `error_message`, `failure_ts`).
        #[arg(long)]
        query: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Leave-one-out evaluation over the corpus.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Repeat the evaluation over values of one parameter.
    Sweep {
        /// epsilon, policy or mode.
        #[arg(long)]
        axis: String,
        /// Comma-separated values of the axis.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Where to write the annotated-line distribution table (CSV).
        #[arg(long)]
        annotation_csv: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
}

/// Flags shared by the pipeline commands; each overrides the config file.
#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Embedding sidecar (`.json` for the debug format).
    #[arg(long)]
    index: Option<PathBuf>,
    /// ngram or http.
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    /// http, replay, oracle or echo-annotated.
    #[arg(long)]
    client: Option<String>,
    /// Replay fixtures (prompt hash → response).
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Save every exchanged prompt/response as replay fixtures.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long)]
    temperature: Option<f64>,
    /// all, all-preceding, closest or closest-preceding.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// max, sum or align.
    #[arg(long)]
    normalizer: Option<String>,
    /// Ignore leading indentation when comparing lines.
    #[arg(long)]
    trim: bool,
    /// Number of similar cases retrieved.
    #[arg(long)]
    r: Option<usize>,
    /// Cutoffs, e.g. `1,3,5,10`.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Any of line, statement, block.
    #[arg(long, value_delimiter = ',')]
    granularity: Option<Vec<String>>,
    /// default, random, annotation-free, directive, baseline or naive-rag.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Main output file.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// CSV flattening of the report.
    #[arg(long)]
    csv: Option<PathBuf>,
}

impl CommonArgs {
    fn resolve(self) -> Result<FileConfig, CliError> {
        let file = match &self.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let flags = FileConfig {
            corpus: self.corpus,
            index: self.index,
            embedder: self.embedder,
            dim: self.dim,
            client: self.client,
            fixtures: self.fixtures,
            record: self.record,
            temperature: self.temperature,
            policy: self.policy,
            fraction: self.fraction,
            epsilon: self.epsilon,
            normalizer: self.normalizer,
            trim: self.trim.then_some(true),
            r: self.r,
            k: self.k,
            granularity: self.granularity,
            mode: self.mode,
            seed: self.seed,
            parallelism: self.parallelism,
            output: self.output,
            csv: self.csv,
            ..FileConfig::default()
        };
        Ok(file.overlay(flags))
    }
}

fn version_text() -> String {
    format!(
        "{}\npipeline: {PIPELINE_ID}\nembedder: {} (dim {})\ntokenizer: {}",
        env!("CARGO_PKG_VERSION"),
        NgramHashEmbedder::NAME,
        NgramHashEmbedder::DEFAULT_DIMENSION,
        HeuristicTokenizer.name()
    )
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest { input, output } => commands::ingest(&input, &output),
        Command::Label {
            corpus,
            repaired,
            output,
            drop_outliers,
            report,
        } => commands::label(&corpus, &repaired, &output, drop_outliers, report.as_deref()),
        Command::Index { common, force } => commands::index(&common.resolve()?, force),
        Command::Localize { query, common } => commands::localize(&query, &common.resolve()?),
        Command::Evaluate { common } => commands::evaluate(&common.resolve()?),
        Command::Sweep {
            axis,
            values,
            annotation_csv,
            common,
        } => commands::sweep(&axis, &values, annotation_csv.as_deref(), &common.resolve()?),
    }
}

fn main() -> ExitCode {
    let version = version_text();
    let matches = Cli::command().version(version.clone()).long_version(version).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("error: {msg}"),
                CliError::Failed(msg) => eprintln!("error: {msg}"),
                CliError::Partial(msg) => eprintln!("{msg}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}
