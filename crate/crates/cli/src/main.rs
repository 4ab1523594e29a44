use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use contrast_lab_cli::{run, Command, Exit, Invocation};

#[derive(Parser)]
#[command(name = "contrast-lab", version, about = "Contrastive loss verification, analysis and training")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Gradient oracle, identity, monotonicity and limit checks
    Verify(Opts),
    /// Temperature and negative-count sweeps of the gradient scaling factor
    Analyze(Opts),
    /// Train one encoder and record per-epoch metrics
    Train(Opts),
    /// Train every variant x batch size x seed and tabulate final metrics
    Compare(Opts),
}

#[derive(Args)]
struct Opts {
    /// JSON config; omitted fields take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if absent
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config's seed (for compare: run only this seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs
    #[arg(long)]
    force: bool,
}

const THREADS_VAR: &str = "CONTRAST_LAB_THREADS";

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, opts) = match cli.command {
        Sub::Verify(o) => (Command::Verify, o),
        Sub::Analyze(o) => (Command::Analyze, o),
        Sub::Train(o) => (Command::Train, o),
        Sub::Compare(o) => (Command::Compare, o),
    };
    let threads = match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) => Some(n),
            Err(_) => {
                eprintln!("error: {THREADS_VAR} must be a non-negative integer, got {v:?}");
                return ExitCode::from(Exit::Usage.code() as u8);
            }
        },
        Err(_) => None,
    };
    let inv = Invocation {
        config: opts.config,
        out: opts.out,
        seed: opts.seed,
        force: opts.force,
        threads,
    };
    ExitCode::from(run(command, &inv).code() as u8)
}
