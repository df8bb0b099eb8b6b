use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use l2tlab::cli::{run, Cli, CliError};

fn emit_error(kind: &str, message: &str) {
    let err = serde_json::json!({ "schema_version": 1, "error": kind, "message": message });
    eprintln!("{err}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            emit_error("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    let outcome = run(&cli).with_context(|| format!("{} failed", cli.command_name()));
    match outcome {
        Ok(manifest) => {
            println!("{}", serde_json::json!({ "complete": manifest.complete, "outputs": manifest.outputs }));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = e.downcast_ref::<CliError>().map_or("internal", CliError::kind);
            emit_error(kind, &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
