use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use mfg_lab_cli::{run_from_path, Overrides, Subcommand};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    CheckMonotonicity,
    SolveMfg,
    SolveNplayer,
    Convergence,
    OracleRiccati,
}

/// Mean-field and N-player solvers for extended mean field games with
/// common noise.
#[derive(Debug, Parser)]
#[command(name = "mfg-lab", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `experiment.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads, 0 for one per core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("cannot start the thread pool: {e}");
        return ExitCode::from(2);
    }
    let cmd = match cli.command {
        Command::CheckMonotonicity => Subcommand::CheckMonotonicity,
        Command::SolveMfg => Subcommand::SolveMfg,
        Command::SolveNplayer => Subcommand::SolveNplayer,
        Command::Convergence => Subcommand::Convergence,
        Command::OracleRiccati => Subcommand::OracleRiccati,
    };
    let ov = Overrides {
        seed: cli.seed,
        out: cli.out,
        threads: cli.threads,
    };
    match run_from_path(cmd, &cli.config, &ov) {
        Ok(outcome) => {
            for a in &outcome.artifacts {
                eprintln!("wrote {}", a.display());
            }
            if outcome.exit_code != 0 {
                eprintln!("{}: violation found", cmd.name());
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
