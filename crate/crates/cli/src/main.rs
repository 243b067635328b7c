mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tsadv_core::pipeline::{combine_reports, prepare, run_attack, train_teacher, Inputs};

use config::{FileConfig, PipelineArgs};

/// GATN adversarial attacks on multivariate time series classifiers.
#[derive(Parser, Debug)]
#[command(name = "tsadv", version)]
struct Cli {
    /// TOML file with `[data]` and `[pipeline]` tables; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the FCN teacher or precompute the DTW distance tensor.
    TrainTeacher(RunArgs),
    /// Train generators over the beta grid and report adversaries.
    Attack(RunArgs),
    /// Combine run directories into tables and signed-rank comparisons.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Archive root holding `NAME/NAME_TRAIN.ts` or `NAME_TRAIN.ts`.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Dataset name resolved under `--data-dir`.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Teacher training set; overrides the resolved `_TRAIN` file.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Attack set, split into D_train and D_eval; overrides `_TEST`.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Optional held-out set for generalization rows; `_HOLDOUT` is picked
    /// up automatically when present.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories written by `attack`.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Where combined tables go.
    #[arg(long, short)]
    output: PathBuf,
}

fn load_inputs(data: &DataArgs) -> Result<Inputs> {
    let (train, test, holdout) = config::resolve(data)?;
    Inputs::load(&train, &test, holdout.as_deref()).map_err(Into::into)
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::TrainTeacher(args) => {
            let (data, cfg) = file.merge(args.data, &args.pipeline)?;
            let inputs = load_inputs(&data)?;
            let prepared = prepare(&inputs, cfg.normalize)?;
            let artifact = train_teacher(&cfg, &prepared)?;
            print_json(&artifact.summary)
        }
        Command::Attack(args) => {
            let (data, cfg) = file.merge(args.data, &args.pipeline)?;
            let inputs = load_inputs(&data)?;
            let run = run_attack(&cfg, &inputs)?;
            print!("{}", tsadv_core::evaluation::reports_csv(&run.reports)?);
            eprintln!("run written to {}", cfg.output.display());
            Ok(())
        }
        Command::Report(args) => {
            let combined = combine_reports(&args.runs, &args.output)
                .with_context(|| format!("combining {} run directories", args.runs.len()))?;
            for n in &combined.notices {
                eprintln!("notice: {n}");
            }
            eprintln!(
                "{} report rows, {} comparisons written to {}",
                combined.document.reports.len(),
                combined.document.comparisons.len(),
                args.output.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
