// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end: argument parsing, configuration, retry policy and
//! artifact provenance around the algorithms in `sublab-core`.

pub mod artifacts;
mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use sublab_core::{Error, Result};

pub use artifacts::{file_hash, verify_input, Provenance, RunManifest, MANIFEST_NAME};
pub use commands::train_mask_retrying;
pub use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "sublab", version, about = "Bigram subnetworks of small transformer language models")]
pub struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config field, e.g. `--set mask.lr=0.01`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    Bigram,
    Model,
}

impl TargetArg {
    fn label(self) -> &'static str {
        match self {
            TargetArg::Bigram => "bigram",
            TargetArg::Model => "model",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PairArg {
    SubnetworkBigram,
    SubnetworkModel,
    ModelBigram,
}

/// Input artifacts shared by most subcommands. Each defaults to its
/// conventional place in the output directory.
#[derive(Args, Debug, Clone, Default)]
pub struct Inputs {
    /// Checkpoint file; defaults to the latest one under `checkpoints/`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    #[arg(long)]
    pub bigrams: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the vocabulary from the corpus files.
    BuildVocab {
        #[arg(long)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tokenize the corpus with an existing vocabulary.
    Tokenize {
        #[arg(long)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the language model, writing periodic checkpoints.
    TrainLm {
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
    /// Count bigrams over the whole token stream.
    CountBigrams {
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one mask and write its binarized form.
    TrainMask {
        #[arg(long, value_enum, default_value = "bigram")]
        target: TargetArg,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        #[arg(long)]
        retry_max: Option<u32>,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train masks over the configured λ grid and correlate each.
    SweepLambdas {
        #[arg(long, value_enum, default_value = "bigram")]
        target: TargetArg,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long)]
        retry_max: Option<u32>,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train bigram masks at every checkpoint over the checkpoint λ grid.
    SweepCheckpoints {
        #[arg(long)]
        checkpoints_dir: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long)]
        retry_max: Option<u32>,
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        bigrams: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlate held-out surprisal series.
    EvalCorrelation {
        #[arg(long, value_enum, default_value = "subnetwork-bigram")]
        pair: PairArg,
        #[arg(long)]
        mask: Vec<PathBuf>,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit `1 − r = c·p^(−γ)` per checkpoint from a checkpoint sweep.
    FitPowerlaw {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pick the sparsest bigram subnetwork within tolerance of λ = 0.
    SelectSubnetwork {
        #[arg(long)]
        correlations: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Median eigen-angles of layerwise ridge maps.
    AnalyzeRotations {
        #[arg(long)]
        mask: Option<PathBuf>,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-layer covariance similarity.
    AnalyzeCovariance {
        #[arg(long, conflicts_with = "random_near_empty")]
        mask: Option<PathBuf>,
        /// Use a random subnetwork with `analysis.near_empty_fraction` of
        /// every tensor active.
        #[arg(long)]
        random_near_empty: bool,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Layer and block breakdown of a subnetwork.
    StructureReport {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter overlap against a block-matched random null. With several
    /// `--mask-b`, the sparsest one larger than `--mask-a` is used.
    OverlapTest {
        #[arg(long)]
        mask_a: PathBuf,
        #[arg(long, required = true)]
        mask_b: Vec<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Held-out loss with the subnetwork kept, removed, or a random match
    /// removed.
    Ablate {
        #[arg(long)]
        mask: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embedding experiments.
    Recipes {
        /// Bigram subnetwork of the checkpoint.
        #[arg(long)]
        mask: PathBuf,
        /// λ for the freshly trained masks; defaults to the mask's own λ.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<String>>,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a continuation of a prompt.
    Generate {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        n_tokens: Option<usize>,
        /// Remove this subnetwork before generating.
        #[arg(long)]
        ablate_mask: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::BuildVocab { .. } => "build-vocab",
            Command::Tokenize { .. } => "tokenize",
            Command::TrainLm { .. } => "train-lm",
            Command::CountBigrams { .. } => "count-bigrams",
            Command::TrainMask { .. } => "train-mask",
            Command::SweepLambdas { .. } => "sweep-lambdas",
            Command::SweepCheckpoints { .. } => "sweep-checkpoints",
            Command::EvalCorrelation { .. } => "eval-correlation",
            Command::FitPowerlaw { .. } => "fit-powerlaw",
            Command::SelectSubnetwork { .. } => "select-subnetwork",
            Command::AnalyzeRotations { .. } => "analyze-rotations",
            Command::AnalyzeCovariance { .. } => "analyze-covariance",
            Command::StructureReport { .. } => "structure-report",
            Command::OverlapTest { .. } => "overlap-test",
            Command::Ablate { .. } => "ablate",
            Command::Recipes { .. } => "recipes",
            Command::Generate { .. } => "generate",
        }
    }
}

/// Machine-readable form of an error, as printed on stderr.
pub fn error_json(e: &Error) -> Value {
    let mut v = json!({ "error": e.kind(), "message": e.to_string() });
    match e {
        Error::TrainingFailure {
            step,
            last_good_step,
            ..
        } => {
            v["step"] = json!(step);
            v["last_good_step"] = json!(last_good_step);
        }
        Error::RetrainSignal { step, .. } => v["step"] = json!(step),
        Error::UndefinedSimilarity { i, j } => {
            v["i"] = json!(i);
            v["j"] = json!(j);
        }
        _ => {}
    }
    v
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    let mut cfg = base.with_overrides(&overrides)?;
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    Ok(cfg)
}

/// Parses `args` (including the program name) and runs the subcommand,
/// returning its JSON summary.
pub fn execute<I, T>(args: I) -> Result<Value>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&args).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let cfg = resolve_config(&cli)?;
    let shown = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let mut run = artifacts::Run::new(cfg, cli.command.name(), shown);
    let result = commands::dispatch(&mut run, cli.command);
    match &result {
        Ok(_) => run.finish(0, None)?,
        Err(e) => {
            // The original error matters more than a failed manifest write.
            let _ = run.finish(1, Some(error_json(e)));
        }
    }
    result
}

/// Process entry point: prints the summary on stdout, or the error as JSON
/// on stderr, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    if let Err(e) = Cli::try_parse_from(&args) {
        use clap::error::ErrorKind;
        if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
            let _ = e.print();
            return 0;
        }
    }
    match execute(args) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("summary serializes"));
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            match e {
                Error::InvalidArgument(_) => 2,
                _ => 1,
            }
        }
    }
}
