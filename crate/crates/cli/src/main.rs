use std::process::ExitCode;

use clap::Parser;
use stem_cli::Cli;

fn main() -> ExitCode {
    stem_cli::execute(Cli::parse())
}
