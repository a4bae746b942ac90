use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use tgo_lab::commands::{
    cmd_simulate, cmd_sweep, cmd_train, cmd_verify, exit_code, CommandOptions,
};
use tgo_lab::verify::VerifyLevel;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Simulate,
    Train,
    Verify,
    Sweep,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Level {
    Fast,
    Full,
}

/// Threshold-guided alignment experiments on tabular environments.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    command: Command,
    /// Flat `key = value` experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Verification depth.
    #[arg(long, value_enum, default_value = "fast")]
    level: Level,
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("TGO_LAB_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .map_err(|_| format!("TGO_LAB_THREADS must be a positive integer, got `{value}`"))?;
    if threads == 0 {
        return Err("TGO_LAB_THREADS must be at least 1".to_string());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(message) = configure_threads() {
        eprintln!("error: {message}");
        return ExitCode::from(2);
    }
    let opts = CommandOptions {
        config_path: cli.config,
        seed: cli.seed,
        out_dir: cli.out,
        level: match cli.level {
            Level::Fast => VerifyLevel::Fast,
            Level::Full => VerifyLevel::Full,
        },
    };
    let result = match cli.command {
        Command::Simulate => cmd_simulate(&opts),
        Command::Train => cmd_train(&opts),
        Command::Sweep => cmd_sweep(&opts),
        Command::Verify => cmd_verify(&opts).map(|report| {
            for c in &report.checks {
                println!("{:<22} {:<8} {}", c.name, c.status, c.detail);
            }
            if !report.passed() {
                eprintln!("verification failed: {}", report.failed_names().join(", "));
                std::process::exit(1);
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
