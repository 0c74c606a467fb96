//! Command-line front end for the GAN laboratory.
//!
//! Exit codes: 0 success, 2 validation error, 3 numeric abort,
//! 4 incomplete comparison.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ganlab::error::Error;
use ganlab::harness::{
    cmd_compare, cmd_plot, cmd_train, Dataset, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "ganlab", about = "2D GAN mode-collapse laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration JSON; defaults apply for absent fields.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Dataset shortcut when no config file is given.
    #[arg(long, default_value = "ring8")]
    dataset: String,

    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self, lambda: Option<f64>) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => {
                let mut c = ExperimentConfig::default();
                c.dataset = match self.dataset.as_str() {
                    "ring8" => Dataset::Ring8,
                    "grid25" => Dataset::Grid25,
                    other => {
                        return Err(Error::Validation(vec![format!(
                            "unknown dataset `{other}` (use ring8 or grid25, or a config file)"
                        )]))
                    }
                };
                c
            }
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(lambda) = lambda {
            cfg.train.lambda = lambda;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Override the diversity-penalty coefficient.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Train a baseline and penalty variants, paired by seed.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for the comparison tree.
        #[arg(long)]
        out: PathBuf,
        /// Number of seeds (0, 1, ..., n-1).
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Comma-separated penalty coefficients to sweep.
        #[arg(long, value_delimiter = ',', default_value = "0.1,1,5,10")]
        lambda: Vec<f64>,
        /// Worker pool size for independent runs.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Probe a trained generator for near-duplicate outputs.
    Probe {
        /// Existing run directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of latent pairs to probe.
        #[arg(long, default_value_t = 24)]
        pairs: usize,
        /// Output-MSE convergence threshold for a pair to count.
        #[arg(long, default_value_t = 1e-4)]
        mse_threshold: f64,
    },
    /// Re-render the plots of an existing run directory.
    Plot {
        /// Existing run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in numeric self-checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Train { config, out, lambda } => {
            let cfg = config.resolve(lambda)?;
            let report = cmd_train(&cfg, &out)?;
            println!(
                "trained: modes={} hq={:.3} frechet={:.4} -> {}",
                report.modes_captured,
                report.hq_fraction,
                report.frechet,
                out.display()
            );
            Ok(0)
        }
        Command::Compare { config, out, seeds, lambda, workers } => {
            let cfg = config.resolve(None)?;
            let seed_list: Vec<u64> = (0..seeds as u64).collect();
            let report = cmd_compare(&cfg, &seed_list, &lambda, &out, workers)?;
            print!("{}", report.text_table());
            if report.incomplete {
                return Ok(4);
            }
            Ok(0)
        }
        Command::Probe { out, pairs, mse_threshold } => {
            let stat = ganlab::harness::cmd_probe_with_threshold(&out, pairs, mse_threshold)?;
            println!(
                "probe: {}/{} converged, mean similarity {:.4}",
                stat.n_converged, stat.n_pairs, stat.mean_similarity
            );
            Ok(0)
        }
        Command::Plot { out } => {
            cmd_plot(&out)?;
            println!("plots written to {}", out.join("plots").display());
            Ok(0)
        }
        Command::Verify { seed } => {
            let checks = ganlab::harness::cmd_verify(seed)?;
            println!("verify: {checks} checks passed");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
