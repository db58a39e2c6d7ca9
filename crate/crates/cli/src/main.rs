use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use inverse_rom::pipeline::{run_optimize, run_parametrize, run_pipeline, run_rom, run_snapshots, PipelineConfig};
use inverse_rom::rom::RomVariant;
use inverse_rom::Error;

/// Reduced order models for inverse boundary problems.
#[derive(Debug, Parser)]
#[command(name = "inverse-rom", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the boundary network on the case target.
    Parametrize(Args),
    /// Sample parameters and build the snapshot set.
    Snapshots(Args),
    /// Sensitivity sweep and final ROM fit.
    Rom(Args),
    /// Search the parameters with the fitted ROM.
    Optimize(Args),
    /// All stages in order.
    Pipeline(Args),
}

#[derive(Debug, clap::Args)]
struct Args {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's `rng_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// ROM variant, e.g. POD-ANN.
    #[arg(long)]
    variant: Option<RomVariant>,
}

fn load(args: &Args) -> Result<(PipelineConfig, PathBuf), Error> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.rng_seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    Ok((cfg, out))
}

fn run(command: &Command) -> Result<(), Error> {
    let args = match command {
        Command::Parametrize(a)
        | Command::Snapshots(a)
        | Command::Rom(a)
        | Command::Optimize(a)
        | Command::Pipeline(a) => a,
    };
    let (cfg, out) = load(args)?;
    let out: &Path = &out;
    match command {
        Command::Parametrize(_) => {
            let r = run_parametrize(&cfg, out)?;
            println!(
                "parametrization: {} epochs, mse {:e}, relative fit error {:.4}, {} parameters",
                r.epochs, r.final_mse, r.fit_relative_error, r.param_dim
            );
        }
        Command::Snapshots(_) => {
            let set = run_snapshots(&cfg, out)?;
            println!("snapshots: M = {}, p = {}, P = {}", set.len(), set.param_dim(), set.dof());
        }
        Command::Rom(_) => {
            let stage = run_rom(&cfg, out, args.variant)?;
            if let Some(report) = &stage.report {
                println!(
                    "sensitivity: {} cells, {} failures",
                    report.cells.len(),
                    report.failures.len()
                );
            }
            println!(
                "rom: {} ({}), train error {:e}",
                stage.selection.variant, stage.selection.reason, stage.fit.train_error
            );
        }
        Command::Optimize(_) | Command::Pipeline(_) => {
            let s = if matches!(command, Command::Pipeline(_)) {
                run_pipeline(&cfg, out, args.variant)?
            } else {
                run_optimize(&cfg, out, args.variant)?
            };
            println!(
                "optimum ({} with {}): fitness {:.6} at {:?}",
                s.best_algorithm, s.variant, s.best_fitness, s.best_mu
            );
            if let Some(f) = s.full_order_fitness {
                println!("full-order fitness at the optimum: {f:.6}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
