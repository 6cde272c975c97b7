//! `r2d2`: train, extract, match, evaluate and self-check from the shell.
//!
//! Exit codes: 0 success, 1 usage or malformed config, 2 runtime failure,
//! 3 self-check failure.

mod commands;
mod config;

use std::fmt;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgAction, Parser, Subcommand};

use commands::{EvalArgs, ExtractArgs, MatchArgs, SelfcheckArgs, ToyAblationArgs, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "r2d2", version, about = "Joint keypoint detector and descriptor")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true, action = ArgAction::SetTrue)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network on synthetic homography pairs.
    Train(TrainArgs),
    /// Detect and describe keypoints in one image.
    Extract(ExtractArgs),
    /// Mutual nearest-neighbour matching of two keypoint files.
    Match(MatchArgs),
    /// Repeatability, MMA and matching score over a list of pairs.
    Eval(EvalArgs),
    /// Gradient checks and closed-form oracles.
    Selfcheck(SelfcheckArgs),
    /// Train and evaluate the three loss variants on toy scenes.
    ToyAblation(ToyAblationArgs),
}

/// How a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
    Selfcheck(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Selfcheck(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) | Failure::Selfcheck(m) => f.write_str(m),
        }
    }
}

impl From<r2d2::Error> for Failure {
    fn from(e: r2d2::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_target(false)
        .init();

    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Extract(a) => commands::extract(a),
        Command::Match(a) => commands::matches(a),
        Command::Eval(a) => commands::eval(a),
        Command::Selfcheck(a) => commands::selfcheck(a),
        Command::ToyAblation(a) => commands::toy_ablation(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
