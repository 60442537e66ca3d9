use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fnnekf::fuzzy::infer;
use fnnekf::io;
use fnnekf::sim::FilterMode;
use fnnekf::training::{
    designed_fis, generate_training_set, mean_loss, train, uniform_grid, TargetRule, TrainConfig,
};

/// Differential-drive localization with a fuzzy-neural noise-adaptive EKF.
#[derive(Debug, Parser)]
#[command(name = "fnnekf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one seeded trial and write its per-step trace CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Filter to run: `ekf` or `fnn-ekf`.
        #[arg(long, value_parser = parse_mode)]
        mode: FilterMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired Monte Carlo comparison of both filters; writes summary.json.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a network to a `d,delta_r` dataset by gradient descent.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        eta: f64,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        /// Seed for the per-epoch pattern shuffle.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the adjustment a network produces for one mismatch value.
    Infer {
        #[arg(long)]
        fis: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        d: f64,
    },
    /// Sample the built-in adjustment rule into a training CSV.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = -0.05, allow_hyphen_values = true)]
        lo: f64,
        #[arg(long, default_value_t = 0.05, allow_hyphen_values = true)]
        hi: f64,
        #[arg(long, default_value_t = 101)]
        points: usize,
        /// Standard deviation of noise added to each target.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the network constructed directly from the built-in adjustment rule.
    Design {
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<FilterMode, String> {
    FilterMode::parse(s).ok_or_else(|| format!("expected `ekf` or `fnn-ekf`, got `{s}`"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, mode, out } => {
            let cfg = io::load_config(&config)?;
            let path = io::simulate(&cfg, mode, &out)?;
            println!("{}", path.display());
        }
        Command::Compare { config, runs, out } => {
            if runs == 0 {
                bail!("--runs must be at least 1");
            }
            let cfg = io::load_config(&config)?;
            let (path, report) = io::compare(&cfg, runs, &out)?;
            for (mode, m) in &report.modes {
                println!(
                    "{mode:>8}  rmse x={:.6} y={:.6} theta={:.6}",
                    m.rmse_mean.x, m.rmse_mean.y, m.rmse_mean.theta
                );
            }
            println!("{}", path.display());
        }
        Command::Train {
            data,
            init,
            out,
            eta,
            epochs,
            seed,
        } => {
            let set = io::read_training_csv(&data)?;
            let start = io::load_fis(&init)?;
            let cfg = TrainConfig {
                learning_rate: eta,
                epochs,
                shuffle_seed: seed,
            };
            let before = mean_loss(&start, &set);
            let (fitted, history) = train(&start, &set, &cfg).context("training failed")?;
            log::info!(
                "loss {before:.6e} -> {:.6e} over {epochs} epochs",
                history.last().copied().unwrap_or(before)
            );
            io::save_fis(&fitted, &out)?;
            println!("{}", out.display());
        }
        Command::Infer { fis, d } => {
            if !d.is_finite() {
                bail!("--d must be finite");
            }
            let params = io::load_fis(&fis)?;
            println!("{}", infer(d, &params));
        }
        Command::GenerateData {
            out,
            lo,
            hi,
            points,
            noise,
            seed,
        } => {
            if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) || points < 2 {
                bail!("need lo < hi and at least 2 points");
            }
            let rule = TargetRule {
                noise_std: noise,
                ..TargetRule::default()
            };
            let set = generate_training_set(&rule, &uniform_grid(lo, hi, points), seed)?;
            io::write_training_csv(&set, &out)?;
            println!("{}", out.display());
        }
        Command::Design { out } => {
            io::save_fis(&designed_fis(&TargetRule::default()), &out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
