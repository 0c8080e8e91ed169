use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stitchlab::render::{render, Format};
use stitchlab::{runner, CliError, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "stitchlab", version, about = "Model-stitching similarity experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Parallel stitching jobs.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Use procedurally generated images instead of CIFAR.
        #[arg(long)]
        synthetic: bool,
        /// L-inf radius in pixel units, for training and evaluation attacks.
        #[arg(long)]
        eps: Option<f32>,
        /// Training attack step size in pixel units.
        #[arg(long)]
        step: Option<f32>,
        /// Training attack iterations.
        #[arg(long)]
        iters: Option<usize>,
        /// Whether the training attack starts at a random point in the ball.
        #[arg(long)]
        random_start: Option<bool>,
    },
    /// Render persisted results as tables or figures.
    Render {
        run_dir: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            workers,
            output_dir,
            synthetic,
            eps,
            step,
            iters,
            random_start,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.apply_overrides(&Overrides {
                synthetic,
                workers,
                output_dir,
                epsilon: eps,
                step_size: step,
                iters,
                random_start,
            });
            cfg.validate()?;
            let (dir, record) = runner::run(&cfg)?;
            println!("{}", dir.display());
            for (k, v) in &record.summary {
                println!("  {k}: {v:.4}");
            }
        }
        Command::Render { run_dir, format } => {
            for f in render(&run_dir, format)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
