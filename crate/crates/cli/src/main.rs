use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = tracechain_cli::Cli::parse();
    let (outcome, format) = tracechain_cli::run(cli, &|k| std::env::var(k).ok());
    let (out, err) = outcome.render(format);
    let _ = std::io::stdout().write_all(out.as_bytes());
    let _ = std::io::stderr().write_all(err.as_bytes());
    ExitCode::from(outcome.exit_code)
}
