//! `digitnet` command-line front end.

mod args;
mod commands;

use std::ffi::OsString;
use std::panic;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{expand_config, Cli};

const EXIT_USER: u8 = 2;
const EXIT_FORMAT: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

fn fail(category: &str, detail: &str) -> ExitCode {
    let detail = detail.lines().next().unwrap_or("").trim();
    eprintln!("error: {category}: {detail}");
    ExitCode::from(match category {
        "format" => EXIT_FORMAT,
        "internal" => EXIT_INTERNAL,
        _ => EXIT_USER,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();

    let argv: Vec<OsString> = std::env::args_os().collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => return fail(e.category().as_str(), &e.to_string()),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = e.print();
                return ExitCode::from(EXIT_USER);
            }
            let text = e.render().to_string();
            return fail("user", text.trim_start_matches("error: "));
        }
    };
    log::debug!("options: {:?}", cli.command.common());

    panic::set_hook(Box::new(|_| {}));
    match panic::catch_unwind(|| commands::run(cli.command)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => fail(e.category().as_str(), &e.to_string()),
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail("internal", &msg)
        }
    }
}
