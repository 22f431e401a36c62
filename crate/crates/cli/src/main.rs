//! `figgen`: prepare data, train the autoencoder and diffusion stages, sample and evaluate.

mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use commands::Cli;
use config::ConfigError;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<ConfigError>()
            || matches!(
                c.downcast_ref::<figgen_core::Error>(),
                Some(figgen_core::Error::Config(_))
            )
    })
}

/// The error chain joined by ": ", skipping causes already quoted by the message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    if std::env::var("FIGGEN_DETERMINISTIC").is_ok_and(|v| v == "1") {
        // must happen before rayon builds its global pool
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(if is_config_error(&e) {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            })
        }
    }
}
