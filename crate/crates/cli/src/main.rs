use std::io::Write;

use clap::Parser;
use strata_cli::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            // a closed pipe (e.g. `| head`) is not an error worth reporting
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            let _ = writeln!(std::io::stdout(), "{text}");
        }
        Err(f) => {
            eprintln!("{}", f.to_json());
            std::process::exit(f.code);
        }
    }
}
