use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uuae::cli::{cmd_oracle, cmd_plot, cmd_train, TrainOptions};

#[derive(Parser)]
#[command(
    name = "uuae",
    version,
    about = "Belief-based distributional RL experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (policy mode, seed) pair listed in the config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Number of runs executed concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Compare a trained checkpoint with the exact return distributions of its greedy policy.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for oracle.csv and oracle_summary.toml.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw learning curves from stats CSVs, one SVG per environment.
    Plot {
        /// Glob matching stats files, e.g. `runs/stats/*.csv`.
        #[arg(long)]
        stats: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> uuae::Result<bool> {
    match cli.command {
        Command::Train {
            config,
            out,
            force,
            parallel,
        } => {
            let summary = cmd_train(
                &config,
                &TrainOptions {
                    out,
                    force,
                    parallel,
                },
            )?;
            for r in &summary.runs {
                match &r.error {
                    None => println!("{}: {} episodes", r.run_id, r.episodes),
                    Some(e) => eprintln!("{}: FAILED after {} episodes: {e}", r.run_id, r.episodes),
                }
            }
            println!("wrote {}", summary.out_dir.display());
            Ok(summary.n_failed() == 0)
        }
        Command::Oracle {
            config,
            checkpoint,
            out,
        } => {
            let report = cmd_oracle(&config, &checkpoint, out.as_deref())?;
            println!("state,action,learned_mean,oracle_mean,learned_variance,oracle_variance");
            for r in &report.rows {
                println!(
                    "{},{},{:.4},{:.4},{:.4},{:.4}",
                    r.state,
                    r.action,
                    r.learned_mean,
                    r.oracle_mean,
                    r.learned_variance,
                    r.oracle_variance
                );
            }
            print!("{}", report.summary_toml());
            Ok(true)
        }
        Command::Plot { stats, out } => {
            for p in cmd_plot(&stats, &out)? {
                println!("wrote {}", p.display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
