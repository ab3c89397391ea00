use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use edg::commands::{
    cmd_eval, cmd_logz, cmd_reference, cmd_sample, cmd_train, EvalOptions, LogZOptions,
    ReferenceOptions, SampleOptions, TrainOptions,
};
use edg::RunResult;

/// Train energy-based diffusion generators and evaluate their samples.
#[derive(Parser)]
#[command(name = "edg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.bin, loss.csv and config.toml.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples from a trained model into samples.csv.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        /// Also compute importance weights (one ODE solve per sample).
        #[arg(long)]
        weights: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the log Z lower bound into logz.json.
    Logz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// MMD between two sample CSVs.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Rows per subsample.
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for mmd.json; the report is always printed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reference samples for the configured target (cached).
    Reference {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print<T: serde::Serialize>(v: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("reports serialise to JSON")
    );
}

fn run(cmd: Command) -> RunResult<()> {
    match cmd {
        Command::Train { config, seed, out } => {
            print(&cmd_train(&TrainOptions { config, seed, out })?);
        }
        Command::Sample {
            checkpoint,
            n,
            weights,
            seed,
            out,
        } => print(&cmd_sample(&SampleOptions {
            checkpoint,
            n,
            with_weights: weights,
            seed,
            out,
        })?),
        Command::Logz {
            checkpoint,
            n,
            seed,
            out,
        } => print(&cmd_logz(&LogZOptions {
            checkpoint,
            n,
            seed,
            out,
        })?),
        Command::Eval {
            samples,
            reference,
            n,
            repeats,
            seed,
            out,
        } => print(&cmd_eval(&EvalOptions {
            samples,
            reference,
            m: n,
            repeats,
            seed,
            out,
        })?),
        Command::Reference {
            config,
            n,
            seed,
            out,
        } => print(&cmd_reference(&ReferenceOptions {
            config,
            n,
            seed,
            out,
        })?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
