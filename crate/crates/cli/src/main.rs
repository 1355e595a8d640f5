mod commands;

use std::process::ExitCode;

use clap::Parser;

use commands::Cli;

/// `error[<category>]: <message>`, with the category taken from the first
/// library error in the chain. Library errors already print their sources.
pub(crate) fn error_line(err: &anyhow::Error) -> String {
    let mut category = "cli";
    let mut parts = Vec::new();
    for cause in err.chain() {
        parts.push(cause.to_string());
        if let Some(e) = cause.downcast_ref::<vqunet_core::Error>() {
            category = e.category();
            break;
        }
    }
    format!("error[{category}]: {}", parts.join(": "))
}

fn main() -> ExitCode {
    // Usage errors exit with 2 through clap.
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(cli.log_level()))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(1)
        }
    }
}
