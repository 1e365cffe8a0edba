//! `evadapt` command-line interface.
//!
//! Settings come from an optional TOML config file; `--seed` and `--out`
//! (or `EVADAPT_SEED` / `EVADAPT_OUT`) override it. Errors print one line,
//! `error[CODE]: message`, and exit with status 1.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evadapt::pipeline::{self, PipelineError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "evadapt", version, about = "Online adaptive next-window prediction for event sequences")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, env = "EVADAPT_CONFIG")]
    config: Option<PathBuf>,
    /// Master seed for data generation, initialization, splitting and shuffling.
    #[arg(long, global = true, env = "EVADAPT_SEED")]
    seed: Option<u64>,
    /// Output directory for every artifact.
    #[arg(long, global = true, env = "EVADAPT_OUT")]
    out: Option<PathBuf>,
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Only print errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort (event log, vocabulary, ground truth).
    Synth,
    /// Train the population model on the training split.
    Train,
    /// Build the hidden-state memory bank from the training split.
    BuildMemory,
    /// Run all strategies online over the test split.
    Run,
    /// Compute metric reports from the stored records and traces.
    Report,
    /// Run synth, train, build-memory, run and report in sequence.
    All,
    /// Print the effective configuration as TOML.
    Config,
}

fn resolve(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    if cli.sequential {
        cfg.exec = evadapt::exec::ExecMode::Sequential;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = resolve(cli)?;
    let stages: &[Command] = match cli.command {
        Command::All => &[Command::Synth, Command::Train, Command::BuildMemory, Command::Run, Command::Report],
        Command::Synth => &[Command::Synth],
        Command::Train => &[Command::Train],
        Command::BuildMemory => &[Command::BuildMemory],
        Command::Run => &[Command::Run],
        Command::Report => &[Command::Report],
        Command::Config => {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
    };
    for stage in stages {
        match stage {
            Command::Synth => {
                let s = pipeline::cmd_synth(&cfg)?;
                println!("synth: {} patients, {} windows -> {}", s.n_patients, s.n_windows, cfg.paths.events().display());
            }
            Command::Train => {
                let r = pipeline::cmd_train(&cfg)?;
                let best = r.best();
                println!(
                    "train: {} epochs, best epoch {} (val loss {:.5}) -> {}",
                    r.epochs_run(),
                    r.best_epoch,
                    best.val_loss,
                    cfg.paths.model().display()
                );
            }
            Command::BuildMemory => {
                let n = pipeline::cmd_build_memory(&cfg)?;
                println!("build-memory: {n} entries -> {}", cfg.paths.bank().display());
            }
            Command::Run => {
                let s = pipeline::cmd_run(&cfg)?;
                println!("run: {} patients, {} records -> {}", s.n_patients, s.n_records, cfg.paths.records().display());
            }
            Command::Report => {
                let set = pipeline::cmd_report(&cfg)?;
                for (strategy, m) in &set.metrics {
                    println!("{strategy:<18} AUPRC {:.4}", m.overall_micro);
                }
                println!("reports -> {}", cfg.paths.reports().display());
            }
            Command::All | Command::Config => unreachable!("expanded above"),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
