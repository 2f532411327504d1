use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use wncs::cli::{self, RunRequest};

#[derive(Parser)]
#[command(name = "wncs", about = "Cart-pole control over a round-based low-power wireless bus")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more seeded repetitions of a scenario.
    Run {
        /// Scenario configuration file (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Override the seed of the first repetition.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of repetitions; seeds increment per repetition.
        #[arg(long, default_value_t = 1)]
        reps: u32,
        /// Output directory for trace, metrics, and summary files.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Exit 0 even if repetitions faulted.
        #[arg(long, default_value_t = false)]
        allow_fault: bool,
    },
    /// Replay a recorded trace: sensing from the file, controllers and
    /// network live.
    Replay {
        #[arg(long)]
        config: PathBuf,
        /// Recorded trace CSV.
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = false)]
        allow_fault: bool,
    },
    /// Parse and validate a configuration, printing the resolved form.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = match args.command {
        Command::Run { config, seed, reps, out, allow_fault } => cli::run(&RunRequest {
            config_path: config,
            output_dir: out,
            seed_override: seed,
            repetitions: reps,
            playback_path: None,
            allow_fault,
        }),
        Command::Replay { config, trace, out, allow_fault } => cli::run(&RunRequest {
            config_path: config,
            output_dir: out,
            seed_override: None,
            repetitions: 1,
            playback_path: Some(trace),
            allow_fault,
        }),
        Command::Validate { config } => cli::validate(&config).map(|()| 0),
    };
    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
