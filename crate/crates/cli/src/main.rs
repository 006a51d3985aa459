//! `qmefix`: runs the model experiments and writes their data files.

mod config;
mod run;

use std::io::Write;
use std::process::ExitCode;

use clap::{Parser, Subcommand as ClapSubcommand};

use config::{merge, parse_config_file, resolve, validate, Flags, Subcommand};
use run::RunError;

#[derive(Parser)]
#[command(name = "qmefix", version, about = "Memory kernel / time-local generator experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(ClapSubcommand)]
enum Command {
    /// Jaynes-Cummings model (γ = 1 units).
    Jc(Flags),
    /// Resonant level model (Γ = 1 units).
    Rlm(Flags),
    /// Pole table of the propagator transform with sampled flags.
    Poles(Flags),
    /// Memory-expansion coefficient table.
    Memexp(Flags),
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, flags) = match cli.command {
        Command::Jc(f) => (Subcommand::Jc, f),
        Command::Rlm(f) => (Subcommand::Rlm, f),
        Command::Poles(f) => (Subcommand::Poles, f),
        Command::Memexp(f) => (Subcommand::Memexp, f),
    };
    match execute(cmd, &flags) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(why)) => {
            eprintln!("numerical failure: {why}");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(RunError::Validation(diags)) => {
            for d in diags {
                eprintln!("invalid configuration: {d}");
            }
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(RunError::Numerical(why)) => {
            eprintln!("numerical failure: {why}");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(RunError::Io(why)) => {
            eprintln!("i/o error: {why}");
            ExitCode::from(EXIT_VALIDATION)
        }
    }
}

/// Runs one configuration; `Ok(Some(_))` means output was written despite a failure.
fn execute(cmd: Subcommand, flags: &Flags) -> Result<Option<String>, RunError> {
    let file = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
            parse_config_file(&text).map_err(|e| RunError::Validation(vec![e]))?
        }
        None => Default::default(),
    };
    let merged = merge(flags, &file).map_err(|e| RunError::Validation(vec![e]))?;
    let config = resolve(cmd, &merged).map_err(|e| RunError::Validation(vec![e]))?;
    let diags = validate(&config);
    if !diags.is_empty() {
        return Err(RunError::Validation(diags));
    }
    let out = run::run(&config)?;
    match &config.out {
        Some(path) => std::fs::write(path, &out.text).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(out.text.as_bytes())
                .map_err(|e| RunError::Io(e.to_string()))?;
        }
    }
    Ok(out.failure)
}
