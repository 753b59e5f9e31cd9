//! Thin CLI over the pipeline stages. Exit codes: 0 success, 2 config
//! error, 3 missing prerequisite stage, 4 runtime/numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lethe::error::Error;
use lethe::pipeline::{ExperimentConfig, Pipeline, StageOutcome};
use lethe::unlearn::UnlearnMode;

#[derive(Parser)]
#[command(name = "lethe", version, about = "Induce, measure, and selectively remove PII memorization in small byte-level language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (TOML). Defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Re-run the stage even if the manifest marks it current.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the injected corpus, eval split, and entity pools.
    Inject(CommonArgs),
    /// Train the target model on the injected corpus.
    Train(CommonArgs),
    /// Train the logit-to-text inverter.
    InvertTrain(CommonArgs),
    /// Decode pseudo texts from entity-swapped query candidates.
    Synthesize(CommonArgs),
    /// Mask sensitive tokens in the decoded pseudo texts.
    Annotate(CommonArgs),
    /// Run selective unlearning (or the GA baseline) in the LoRA subspace.
    Unlearn {
        #[command(flatten)]
        common: CommonArgs,
        /// Data source / objective: pseudo, oracle, or ga.
        #[arg(long, value_parser = ["pseudo", "oracle", "ga"])]
        mode: String,
    },
    /// Emit privacy reports before and after unlearning.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Restrict to one unlearned snapshot.
        #[arg(long, value_parser = ["pseudo", "oracle", "ga"])]
        mode: Option<String>,
    },
    /// Render the Markdown comparison report.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        /// Additional run directories to include.
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
    },
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.global_seed = seed;
    }
    Ok(cfg)
}

fn describe(stage: &str, outcome: StageOutcome) {
    if outcome.ran {
        println!("{stage}: completed in {:.1}s", outcome.elapsed_secs);
    } else {
        println!("{stage}: up to date (skipped; use --force to re-run)");
    }
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Inject(c) => {
            let mut p = Pipeline::open(load_config(&c)?)?;
            describe("inject", p.stage_inject(c.force)?);
        }
        Command::Train(c) => {
            let mut p = Pipeline::open(load_config(&c)?)?;
            describe("train", p.stage_train(c.force)?);
        }
        Command::InvertTrain(c) => {
            let mut p = Pipeline::open(load_config(&c)?)?;
            describe("invert-train", p.stage_invert_train(c.force)?);
        }
        Command::Synthesize(c) => {
            let mut p = Pipeline::open(load_config(&c)?)?;
            describe("synthesize", p.stage_synthesize(c.force)?);
        }
        Command::Annotate(c) => {
            let mut p = Pipeline::open(load_config(&c)?)?;
            describe("annotate", p.stage_annotate(c.force)?);
        }
        Command::Unlearn { common, mode } => {
            let mode = UnlearnMode::parse(&mode)?;
            let mut p = Pipeline::open(load_config(&common)?)?;
            describe(
                &format!("unlearn:{}", mode.name()),
                p.stage_unlearn(mode, common.force)?,
            );
        }
        Command::Eval { common, mode } => {
            let mode = mode.as_deref().map(UnlearnMode::parse).transpose()?;
            let mut p = Pipeline::open(load_config(&common)?)?;
            describe("eval", p.stage_eval(mode, common.force)?);
        }
        Command::Report { common, runs } => {
            let mut p = Pipeline::open(load_config(&common)?)?;
            describe("report", p.stage_report(&runs)?);
            println!("wrote {}", p.out_dir().join("report.md").display());
        }
    }
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Coverage(_) | Error::Disjointness(_) | Error::Serde(_) => 2,
        Error::MissingStage(_) => 3,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 4,
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
