use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use neuroalign::align::Condition;
use neuroalign::error::Error;
use neuroalign::pipeline::{ExperimentConfig, Pipeline, RunOptions, Stage, StageOutcome};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_GATE_FAILURE: u8 = 4;

#[derive(Parser)]
#[command(name = "neuroalign", version, about = "Brain-alignment controlled fine-tuning on synthetic neural data")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed, overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Comma-separated participant ids, e.g. p01,p03.
    #[arg(long, global = true, value_delimiter = ',')]
    participants: Option<Vec<String>>,

    /// misaligned, preserving or tuned.
    #[arg(long, global = true, value_parser = parse_condition)]
    condition: Option<Condition>,

    /// Held-out run, 0 to 3.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(0..=3))]
    heldout_run: Option<u64>,

    /// Concurrent jobs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the stimulus corpus and the synthetic cohort.
    Simulate,
    /// Pretrain the base language model.
    Pretrain,
    /// Fine-tune per participant, condition and held-out run.
    Train,
    /// Alignment, LM losses and the success gate.
    Eval,
    /// Probe the base and fine-tuned models.
    Probe,
    /// Win matrices and win-rate significance between conditions.
    Compare,
    /// Consolidated report and plot data.
    Report,
    /// Every stage in order.
    Run,
    /// Print the effective config as TOML.
    Config,
}

fn parse_condition(s: &str) -> Result<Condition, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = &cli.out {
        config.output_dir = o.clone();
    }
    config.validate()?;
    Ok(config)
}

fn report(outcome: &StageOutcome) {
    eprintln!("{}: {} manifest(s)", outcome.stage, outcome.manifests.len());
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
}

fn run(cli: &Cli) -> Result<u8, Error> {
    let config = load_config(cli)?;
    if let Command::Config = cli.command {
        print!("{}", config.to_toml());
        return Ok(0);
    }
    let opts = RunOptions {
        participants: cli.participants.clone(),
        condition: cli.condition,
        heldout_run: cli.heldout_run.map(|h| h as usize),
        jobs: cli.jobs,
    };
    let pipeline = Pipeline::new(config, opts)?;
    let stages: Vec<Stage> = match cli.command {
        Command::Simulate => vec![Stage::Simulate],
        Command::Pretrain => vec![Stage::Pretrain],
        Command::Train => vec![Stage::Train],
        Command::Eval => vec![Stage::Eval],
        Command::Probe => vec![Stage::Probe],
        Command::Compare => vec![Stage::Compare],
        Command::Report => vec![Stage::Report],
        Command::Run => Stage::ALL.to_vec(),
        Command::Config => unreachable!(),
    };
    let mut code = 0;
    for stage in &stages {
        let outcome = pipeline.run_stage(*stage)?;
        report(&outcome);
        if outcome.gate_failure_only && stages.len() == 1 {
            code = EXIT_GATE_FAILURE;
        }
    }
    Ok(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => EXIT_CONFIG,
                Error::MissingPrerequisite { .. } => EXIT_MISSING,
                _ => EXIT_FAILURE,
            })
        }
    }
}
