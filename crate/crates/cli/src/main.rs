mod args;
mod commands;
mod io;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Transfer { context, reference, config } => commands::transfer(config.resolve()?, context, reference),
        Command::Invert { input, record, prompt, config } => commands::invert_cmd(config.resolve()?, input, record, prompt),
        Command::Reconstruct { record, input, config } => commands::reconstruct_cmd(config.resolve()?, record, input),
        Command::InspectFeatures { input, reference, t, config } => commands::inspect(config.resolve()?, input, reference, t),
        Command::Metrics { a, b, out } => commands::metrics(a, b, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", serde_json::json!({ "error": first }));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}");
            eprintln!("{}", serde_json::json!({ "error": message }));
            ExitCode::from(1)
        }
    }
}
