//! `visaware` command line.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use super::config::{RunConfig, TaskKind};
use super::stages;
use crate::error::Result;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "visaware",
    version,
    about = "Visual-aware sentence modeling pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; omitted keys take defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Images retrieved per sentence.
    #[arg(long, global = true, value_name = "N")]
    m: Option<usize>,
    /// Text-only baseline: same pipeline with m = 0.
    #[arg(long, global = true)]
    no_visual: bool,
    /// Working directory for corpus, checkpoints and outputs.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    task: Option<TaskKind>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Train the shared text/image embedding.
    TrainEmbed,
    /// Embed every corpus image and save the index.
    BuildIndex,
    /// Retrieve the top-m images for every held-out caption.
    Retrieve,
    /// Train a task model on top of the visual-aware encoder.
    TrainTask,
    /// Evaluate a trained task model on the test split.
    Evaluate,
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = stages::GRADCHECK_POINTS)]
        points: usize,
    },
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(m) = self.m {
            cfg.retrieval.m = m;
        }
        if self.no_visual {
            cfg.retrieval.m = 0;
        }
        if let Some(out) = &self.out {
            cfg.paths.out_dir = out.clone();
        }
        if let Some(task) = self.task {
            cfg.task.task = task;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Retrieval depth for evaluation: only set when given on the command
    /// line, otherwise the checkpoint's own value is used.
    fn eval_m(&self) -> Option<usize> {
        if self.no_visual {
            Some(0)
        } else {
            self.m
        }
    }
}

/// Parses `argv` (program name first), runs the stage and returns the
/// process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = cli.common.config()?;
    match &cli.command {
        Command::GenData => {
            let c = stages::gen_data(&cfg)?;
            println!(
                "wrote {} texts, {} images to {}",
                c.texts.len(),
                c.images.len(),
                cfg.corpus_dir().display()
            );
        }
        Command::TrainEmbed => {
            stages::train_embed(&cfg)?;
            println!("wrote {}", cfg.out(stages::EMBEDDING_CHECKPOINT).display());
        }
        Command::BuildIndex => {
            let index = stages::build_index(&cfg)?;
            println!("indexed {} images", index.len());
        }
        Command::Retrieve => {
            let results = stages::retrieve(&cfg)?;
            println!(
                "retrieved m={} for {} queries into {}",
                cfg.retrieval.m,
                results.len(),
                cfg.out(stages::RETRIEVAL_TSV).display()
            );
        }
        Command::TrainTask => {
            stages::train_task(&cfg)?;
            println!(
                "trained {} (m={}) into {}",
                cfg.task.task.as_str(),
                cfg.retrieval.m,
                cfg.out(&stages::task_checkpoint(cfg.task.task)).display()
            );
        }
        Command::Evaluate => {
            let m = stages::evaluate_task(&cfg, cli.common.eval_m())?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Command::Gradcheck { points } => {
            let reports = stages::gradcheck(&cfg, *points)?;
            let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
            for r in &reports {
                println!(
                    "{:<24} {} max_rel_err={:.3e} ({} checks)",
                    r.name,
                    if r.passed { "ok  " } else { "FAIL" },
                    r.max_rel_err,
                    r.checked
                );
            }
            println!("max rel err {worst:.3e} across {} checks", reports.len());
            if let Some(bad) = reports.iter().find(|r| !r.passed) {
                return Err(crate::error::Error::Numeric(format!(
                    "gradient check {} failed with relative error {}",
                    bad.name, bad.max_rel_err
                )));
            }
        }
    }
    Ok(())
}
