use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eslab::cli::{exit, exit_code, parse_config, render_summary, run_experiment, summarize_dir};

#[derive(Parser)]
#[command(name = "eslab", version, about = "Expected-smoothness SGD experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Override the output directory from the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print a per-schedule table from the reports under a directory.
    Summarize { dir: PathBuf },
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                exit::CONFIG as u8
            } else {
                0
            });
        }
    };
    let result = match cli.command {
        Command::Validate { config } => parse_config(&config).map(|cfg| {
            println!("ok: {} ({})", config.display(), cfg.kind.name());
            exit::OK
        }),
        Command::Run { config, output } => parse_config(&config).and_then(|mut cfg| {
            if let Some(dir) = output {
                cfg.output = dir;
            }
            let outcome = run_experiment(&cfg)?;
            for line in &outcome.lines {
                println!("{line}");
            }
            println!("wrote {}", cfg.output.display());
            Ok(outcome.exit_code())
        }),
        Command::Summarize { dir } => summarize_dir(&dir).map(|rows| {
            print!("{}", render_summary(&rows));
            exit::OK
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
