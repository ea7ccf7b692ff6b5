//! `bevlocate` command-line interface.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{BenchArgs, EvalArgs, GradcheckArgs, LocalizeArgs, RenderArgs, SynthArgs, TrainArgs};

/// Exit status for a command whose own checks failed.
const EXIT_VERIFICATION: u8 = 2;
const EXIT_USAGE: u8 = 1;

#[derive(Parser)]
#[command(
    name = "bevlocate",
    version,
    about = "BEV rendering and map registration for GNSS-denied localization"
)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and a camera sequence in it.
    Synth(SynthArgs),
    /// Train the encoder and rendering head against map-crop labels.
    Train(TrainArgs),
    /// Render BEV images for every frame of a sequence.
    Render(RenderArgs),
    /// Register BEV images against the map and write predictions.
    Localize(LocalizeArgs),
    /// Compute APE statistics and match rate.
    Eval(EvalArgs),
    /// Check every backward pass against finite differences.
    Gradcheck(GradcheckArgs),
    /// Time the fast NCC path.
    Bench(BenchArgs),
}

/// A command ran but its result did not meet its own acceptance check.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn error_line(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            error_line("usage", e.kind().as_str().unwrap_or("invalid arguments"));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Render(a) => commands::render(a),
        Command::Localize(a) => commands::localize(a),
        Command::Eval(a) => commands::eval(a, cli.verbose),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<VerificationFailed>() => {
            error_line("verification", &format!("{e:#}"));
            ExitCode::from(EXIT_VERIFICATION)
        }
        Err(e) => {
            error_line("failed", &format!("{e:#}"));
            ExitCode::from(EXIT_USAGE)
        }
    }
}
