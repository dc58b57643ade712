//! The `fbkws` command line: dataset synthesis and ingestion, training,
//! evaluation, multiplication counts and filterbank export.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fbkws_core::dsp::NUM_FRAMES;
use fbkws_core::model::Variant;

use crate::commands::{count, eval, export, synth, train, write_file};
use crate::config::{load_dataset, load_experiment, Profile};
pub use crate::error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "fbkws", version, about = "Keyword spotting with a learned filterbank front-end")]
pub struct Cli {
    /// Defaults every config file is merged over.
    #[arg(long, value_enum, default_value_t = Profile::Paper, global = true)]
    pub profile: Profile,
    /// Worker threads for repetitions and evaluation.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic corpus, or index an on-disk corpus into a manifest.
    Synth(SynthArgs),
    /// Train every seed of an experiment; finished seeds are skipped.
    Train(TrainArgs),
    /// Accuracy, significance, multiplication and filterbank reports.
    Eval(EvalArgs),
    /// Multiplications per second of input for one or more `K`.
    Count(CountArgs),
    /// Rectified filterbank `max(W, 0)` of a checkpoint as CSV.
    ExportFb(ExportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output root; the run lands in `<out>/runs/<name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directories (`<out>/runs/<name>`).
    pub runs: Vec<PathBuf>,
    /// Adds the config's run and its `eval.compare` runs.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Test manifest; defaults to the first run's.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory for the result CSVs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fail unless every checkpoint has this `K`.
    #[arg(long)]
    pub filters: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    /// Defaults to the profile's variant.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long, value_delimiter = ',', default_values_t = [40, 8, 5])]
    pub filters: Vec<usize>,
    #[arg(long, default_value_t = NUM_FRAMES)]
    pub frames: usize,
    #[arg(long)]
    pub csv: bool,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Checkpoint file, or a run directory with `--avg-seeds`.
    pub path: PathBuf,
    /// Average `g(W)` over every finished seed of the run directory.
    #[arg(long)]
    pub avg_seeds: bool,
    /// Append the Mel filterbank of the same `K`.
    #[arg(long)]
    pub mel: bool,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let cfg = load_dataset(a.config.as_deref(), cli.profile)?;
            let out = a.out.unwrap_or_else(|| cfg.default_out(cli.profile));
            synth::run(&cfg, &out)
        }
        Command::Train(a) => {
            let mut cfg = load_experiment(a.config.as_deref(), cli.profile)?;
            if let Some(o) = a.out {
                cfg.out = o;
            }
            if let Some(j) = cli.jobs {
                cfg.jobs = j.max(1);
            }
            train::run(&cfg).map(|_| ())
        }
        Command::Eval(a) => {
            let mut runs = a.runs;
            let mut jobs = cli.jobs;
            let mut out = a.out;
            if let Some(path) = &a.config {
                let cfg = load_experiment(Some(path), cli.profile)?;
                runs.push(cfg.run_dir());
                runs.extend(cfg.eval.compare.iter().map(|n| cfg.out.join("runs").join(n)));
                jobs = jobs.or(Some(cfg.jobs));
                out = out.or_else(|| Some(cfg.out.join("results")));
            }
            let out = out.unwrap_or_else(|| {
                runs.first()
                    .and_then(|r| r.parent())
                    .and_then(|r| r.parent())
                    .map(|o| o.join("results"))
                    .unwrap_or_else(|| PathBuf::from("results"))
            });
            let req = eval::EvalRequest {
                runs,
                manifest: a.manifest,
                out,
                filters: a.filters,
                jobs: jobs.unwrap_or(1).max(1),
            };
            let summary = eval::run(&req)?;
            for p in &summary.written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Count(a) => {
            let variant = a.variant.unwrap_or(match cli.profile {
                Profile::Paper => Variant::Res15Like,
                Profile::Desk => Variant::Res8NarrowLike,
            });
            let req = count::CountRequest {
                variant,
                filters: a.filters,
                frames: a.frames,
                csv: a.csv,
            };
            print!("{}", count::render(&req)?);
            Ok(())
        }
        Command::ExportFb(a) => {
            let req = export::ExportRequest {
                path: a.path,
                avg_seeds: a.avg_seeds,
                mel: a.mel,
            };
            emit(a.out.as_ref(), &export::render(&req)?)
        }
    }
}
