// negated comparisons are deliberate: they treat NaN as failure
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod config;
mod run;

use config::Study;

#[derive(Parser)]
#[command(name = "wgpro", version, about = "Robust optimization case studies with warped Gaussian process constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the study described by a TOML config and write CSV outputs plus a manifest.
    Run {
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: `output_dir` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the study named in the config.
        #[arg(long, value_enum)]
        study: Option<Study>,
        /// Comma-separated confidence levels 1-alpha replacing the config grid.
        #[arg(long, value_delimiter = ',')]
        points: Option<Vec<f64>>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn main() -> ExitCode {
    let Command::Run { config, seed, out, study, points, jobs } = Cli::parse().command;
    let overrides = run::Overrides { seed, out, study, points };
    if let Some(n) = jobs {
        if n == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = wgpro_core::exec::set_threads(n) {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let cfg = match run::load_config(&config, overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run::execute(&cfg) {
        Ok(summary) => {
            for o in &summary.outputs {
                eprintln!("wrote {} ({} rows)", o.file, o.rows);
            }
            if summary.failed_points > 0 {
                eprintln!("{} point(s) failed; see the status columns", summary.failed_points);
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
