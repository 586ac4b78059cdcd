use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use epsmooth_cli::{run, CliError, Mode, Overrides, RunConfig};

/// Epsilon-insensitive smoothing, constrained estimation and prediction for
/// linear state-space models.
#[derive(Debug, Parser)]
#[command(name = "epsmooth", version)]
struct Args {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Overrides the mode in the configuration
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Seed for simulated noise
    #[arg(long)]
    seed: Option<u64>,
    /// Dual solver KKT tolerance
    #[arg(long)]
    tol: Option<f64>,
    /// Measurement CSV (`k,y1,...,ym`)
    #[arg(long)]
    input: Option<PathBuf>,
    /// Result document; printed to stdout when omitted
    #[arg(long)]
    output: Option<PathBuf>,
    /// Plot-ready CSV table
    #[arg(long)]
    plot_table: Option<PathBuf>,
    /// Measurement CSV written by `--mode simulate`
    #[arg(long)]
    measurements_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let outcome = RunConfig::from_path(&args.config).and_then(|mut cfg| {
        Overrides {
            mode: args.mode,
            seed: args.seed,
            tol: args.tol,
            input: args.input,
            output: args.output,
            plot_table: args.plot_table,
            measurements_out: args.measurements_out,
        }
        .apply(&mut cfg);
        run(&cfg)
    });
    match outcome {
        Ok(Some(document)) => {
            println!("{document}");
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("epsmooth: {e}");
            ExitCode::from(CliError::exit_code(&e))
        }
    }
}
