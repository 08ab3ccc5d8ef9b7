mod commands;
mod netpbm;

use std::process::ExitCode;

use clap::Parser;

use commands::{Cli, CliError};

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("SATNET_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("SATNET_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Domain(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let line = rendered.lines().next().unwrap_or("invalid usage");
            eprintln!("satnet: {}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match configure_threads().and_then(|()| commands::dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("satnet: {e}");
            ExitCode::from(e.code())
        }
    }
}
