//! `probefield` command-line driver.
//!
//! Every flag may also come from a JSON `--config` file whose keys are the
//! flag names; flags on the command line win. A run manifest can be passed
//! back as `--config` to repeat the run.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use probefield::Error;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Validation(_) | Error::Parse { .. } | Error::Format(_) => 2,
        Error::Io { .. } => 3,
        Error::Numerical(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match args::parse(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(args::ArgError::Clap(e)) => e.exit(),
        Err(args::ArgError::Core(e)) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
