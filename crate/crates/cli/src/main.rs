//! Command-line pipeline driver: staged execution over a single run
//! directory, gated by the resolved-configuration digest.

mod config;
mod manifest;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{Config, Overrides};
use crate::manifest::{GateError, RunManifest, Stage};
use crate::pipeline::{Ctx, EmitKind};

#[derive(Parser)]
#[command(
    name = "phqeval",
    version,
    about = "Evaluate subtask-decomposed depression-screening LLM responses and curate SFT/DPO datasets"
)]
struct Cli {
    /// Configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory holding all stage artifacts.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Label extraction scheme override: first (ir) or last (sr) occurrence.
    #[arg(long, global = true)]
    scheme: Option<String>,

    /// Restrict the run to these configured model names.
    #[arg(long, global = true, value_delimiter = ',')]
    models: Option<Vec<String>>,

    /// Corpus sampling seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// DPO pairing policy override: cross_product or one_per_sample.
    #[arg(long, global = true)]
    pairing: Option<String>,

    /// Outlier z-score threshold override.
    #[arg(long, global = true)]
    z_threshold: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, filter, and balance the annotated corpus.
    Ingest,
    /// Prompt inspection utilities.
    Prompt {
        #[command(subcommand)]
        command: PromptCommand,
    },
    /// Run the few-shot batch against the configured endpoints.
    Run,
    /// Parse raw responses into per-subtask label occurrences.
    Parse,
    /// Compute linguistic and reasoning metrics per model.
    Eval,
    /// Partition samples by cross-model correctness.
    Partition,
    /// Emit a curated dataset from the partition.
    Emit {
        #[arg(value_enum)]
        what: EmitWhat,
    },
    /// Render evaluation tables and exports.
    Report,
    /// Export flagged responses for manual review.
    Outliers,
}

#[derive(Subcommand)]
enum PromptCommand {
    /// Print the assembled few-shot message sequence for one sample.
    Preview {
        /// Sample id; the first corpus sample when omitted.
        #[arg(long)]
        sample: Option<String>,
        /// Sample index into the corpus order.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EmitWhat {
    Sft,
    Dpo,
    EvalSplit,
}

impl From<EmitWhat> for EmitKind {
    fn from(what: EmitWhat) -> EmitKind {
        match what {
            EmitWhat::Sft => EmitKind::Sft,
            EmitWhat::Dpo => EmitKind::Dpo,
            EmitWhat::EvalSplit => EmitKind::EvalSplit,
        }
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_MISSING_STAGE: u8 = 3;
const EXIT_DIGEST_MISMATCH: u8 = 4;

fn main() -> ExitCode {
    // Unknown flags and malformed invocations exit with the usage code.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            let message = error.to_string().replace('\n', "; ");
            eprintln!("error: {message}");
            let code = if error.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                match error.downcast_ref::<GateError>() {
                    Some(GateError::MissingStage(_)) => EXIT_MISSING_STAGE,
                    Some(GateError::DigestMismatch(_)) => EXIT_DIGEST_MISMATCH,
                    None => EXIT_FAILURE,
                }
            };
            ExitCode::from(code)
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let config_path = cli
        .config
        .ok_or_else(|| UsageError("--config <file> is required".into()))?;
    let run_dir = cli
        .run_dir
        .ok_or_else(|| UsageError("--run-dir <dir> is required".into()))?;
    let overrides = Overrides {
        scheme: cli.scheme,
        models: cli.models,
        seed: cli.seed,
        pairing: cli.pairing,
        z_threshold: cli.z_threshold,
    };
    let config = Config::load(&config_path, &overrides)?;
    let digest = config.digest();
    let ctx = Ctx {
        config,
        digest,
        run_dir,
    };

    let stage = match &cli.command {
        Command::Ingest => Some(Stage::Ingest),
        Command::Run => Some(Stage::Run),
        Command::Parse => Some(Stage::Parse),
        Command::Eval => Some(Stage::Eval),
        Command::Partition => Some(Stage::Partition),
        Command::Emit { .. } => Some(Stage::Emit),
        Command::Report => Some(Stage::Report),
        Command::Outliers => Some(Stage::Outliers),
        Command::Prompt { .. } => None,
    };

    let mut manifest = RunManifest::load(&ctx.run_dir)?;
    if let Some(stage) = stage {
        manifest.check_dependencies(stage, &ctx.digest)?;
    } else if !manifest.is_complete(Stage::Ingest, &ctx.digest) {
        // Prompt preview reads the ingested corpus but completes no stage.
        let gate = if manifest.stages.contains_key(Stage::Ingest.name()) {
            GateError::DigestMismatch(Stage::Ingest.name().to_string())
        } else {
            GateError::MissingStage(Stage::Ingest.name().to_string())
        };
        return Err(gate.into());
    }

    match cli.command {
        Command::Ingest => pipeline::stage_ingest(&ctx)?,
        Command::Prompt {
            command: PromptCommand::Preview { sample, index },
        } => pipeline::prompt_preview(&ctx, sample.as_deref(), index)?,
        Command::Run => pipeline::stage_run(&ctx)?,
        Command::Parse => pipeline::stage_parse(&ctx)?,
        Command::Eval => pipeline::stage_eval(&ctx)?,
        Command::Partition => pipeline::stage_partition(&ctx)?,
        Command::Emit { what } => pipeline::stage_emit(&ctx, what.into())?,
        Command::Report => pipeline::stage_report(&ctx)?,
        Command::Outliers => pipeline::stage_outliers(&ctx)?,
    }

    if let Some(stage) = stage {
        manifest.mark_complete(stage, &ctx.digest);
        manifest.save(&ctx.run_dir)?;
    }
    Ok(())
}
