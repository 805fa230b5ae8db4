use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use condadapt::pipeline::load_config;
use condadapt::Pipeline;
use condadapt_core::config::PipelineConfig;

#[derive(Parser)]
#[command(name = "condadapt", version, about = "Condition adaptation for frozen vision tasks")]
struct Cli {
    /// Pipeline configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `output_dir` of the configuration.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render reference, condition and held-out datasets.
    GenData,
    /// Train and freeze the segmentation and retrieval networks.
    TrainTasks,
    /// Compute approximated ground truth on the reference sequence.
    PseudoGt,
    /// Train translation models and generate condition sequences.
    TrainGan {
        /// Train only this condition id.
        #[arg(long)]
        condition: Option<u32>,
    },
    /// Pretrain the identity adapter and train one adapter per condition.
    TrainAdapters,
    /// Train the condition classifier.
    TrainClassifier,
    /// Build the parameter memory and calibrate the novelty threshold.
    BuildMemory,
    /// Score frozen tasks with and without adapters.
    Evaluate,
    /// Stream the held-out condition through the online orchestrator.
    OnlineRun,
    /// Aggregate reports and write the output manifest.
    Report,
    /// Run every stage in order.
    RunAll,
    /// Print the default configuration.
    DefaultConfig,
}

fn run(cli: Cli) -> condadapt::Result<()> {
    let mut config = match &cli.config {
        Some(path) => load_config(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.output {
        config.output_dir = out.to_string_lossy().into_owned();
    }
    let (name, condition) = match cli.command {
        Command::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&config).expect("config serializes"));
            return Ok(());
        }
        Command::RunAll => return Pipeline::new(config)?.run_all(),
        Command::GenData => ("gen-data", None),
        Command::TrainTasks => ("train-tasks", None),
        Command::PseudoGt => ("pseudo-gt", None),
        Command::TrainGan { condition } => ("train-gan", condition),
        Command::TrainAdapters => ("train-adapters", None),
        Command::TrainClassifier => ("train-classifier", None),
        Command::BuildMemory => ("build-memory", None),
        Command::Evaluate => ("evaluate", None),
        Command::OnlineRun => ("online-run", None),
        Command::Report => ("report", None),
    };
    Pipeline::new(config)?.run(name, condition)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
