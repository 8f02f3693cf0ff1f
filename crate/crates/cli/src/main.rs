//! `tap`: generation, training, evaluation and attention export.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod error;
mod export;
mod gen_toa;
mod http;
mod io;
mod synth;
mod train;

use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "tap", version, about = "Tree-of-attribute prompt learning")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Distill an attribute tree from a chat model or a recorded transcript.
    GenToa(gen_toa::GenToaArgs),
    /// Render a synthetic attribute world and pretrain a toy backbone on it.
    SynthData(synth::SynthArgs),
    /// Train prompts for every seed and evaluate them.
    Train(Box<train::TrainArgs>),
    /// Re-evaluate a training run, possibly under another inference setting.
    Eval(train::EvalArgs),
    /// Write per-description attention weights for one image.
    ExportAttn(export::ExportArgs),
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenToa(a) => gen_toa::run(a),
        Command::SynthData(a) => synth::run(a),
        Command::Train(a) => train::run(*a),
        Command::Eval(a) => train::eval(a),
        Command::ExportAttn(a) => export::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            let err = CliError::args(e.kind().to_string());
            eprintln!("{}", err.record());
            return ExitCode::from(err.kind.exit_code() as u8);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", e.record());
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
