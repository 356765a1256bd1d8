use std::process::ExitCode;

use clap::Parser;
use idm_cli::commands::{run, Cli};
use idm_cli::error::{Category, CliError};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            let err = CliError::new(Category::Usage, first);
            eprintln!("{err}");
            eprintln!("{}", msg.lines().skip(1).collect::<Vec<_>>().join("\n").trim());
            return ExitCode::from(Category::Usage.exit_code() as u8);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).parse_default_env().format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.category.exit_code() as u8)
        }
    }
}
