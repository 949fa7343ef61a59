//! `anchorflow` command line: dataset generation, training, sampling,
//! evaluation and step-count benchmarks.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! failure (non-finite loss, gradient or sample), 1 anything else.

mod bench;
mod eval;
mod gen;
mod out;
mod sample;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "anchorflow", version, about = "Few-step flows and anchor-guided synthesis on toy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset from the config's `[data]` section
    Gen(gen::GenArgs),
    /// Train a shortcut, anchor (Stage I) or HR (Stage II) model
    Train(train::TrainArgs),
    /// Draw samples from one or two checkpoints
    Sample(sample::SampleArgs),
    /// Compute metrics on arrays or checkpoints
    Eval(eval::EvalArgs),
    /// Sweep few-step sampler step counts against an Euler reference
    Bench(bench::BenchArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen::run(a),
        Command::Train(a) => train::run(a),
        Command::Sample(a) => sample::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Bench(a) => bench::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(out::exit_code(&e))
        }
    }
}
