use clap::Parser;

use sofair_cli::{run, Cli, CliError};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            std::process::exit(0);
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::usage(first).line());
            std::process::exit(1);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", e.line());
        std::process::exit(e.kind.code());
    }
}
