mod args;
mod commands;
mod error;
mod manifest;
mod settings;

use args::Cli;
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};
use serde_json::json;
use std::ffi::OsString;
use std::process::ExitCode;

/// Long flags of the deepest subcommand named in `argv`.
fn valid_flags(argv: &[OsString]) -> Vec<String> {
    let mut cmd = Cli::command();
    cmd.build();
    let mut current = &cmd;
    for arg in argv.iter().skip(1).filter_map(|a| a.to_str()) {
        if let Some(sub) = current.find_subcommand(arg) {
            current = sub;
        }
    }
    let mut flags: Vec<String> = current
        .get_arguments()
        .filter_map(|a| a.get_long().map(|l| format!("--{l}")))
        .collect();
    flags.sort();
    flags
}

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            let line = json!({
                "error": "usage",
                "kind": format!("{:?}", e.kind()),
                "message": error::one_line(&message),
                "valid_flags": valid_flags(&argv),
            });
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code())
        }
    }
}
