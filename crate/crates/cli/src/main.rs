use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use refinery_cli::args::Cli;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let body = serde_json::json!({ "error": "usage", "message": e.to_string().trim() });
            eprintln!("{body}");
            return ExitCode::from(2);
        }
    };
    match refinery_cli::commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", refinery_cli::error_json(&e));
            ExitCode::FAILURE
        }
    }
}
