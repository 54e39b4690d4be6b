use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use sidp_cli::config::ExperimentConfig;
use sidp_cli::experiments::{
    accountant_line, run_experiment, run_sweep, run_variance_demo, variance_demo_csv,
    variance_demo_text, ExperimentResult, VarianceDemoArgs,
};
use sidp_cli::report::emit_report;

/// Differentially private training with scale-invariant noisy weights.
#[derive(Parser)]
#[command(name = "sidp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Replace the config's seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output stem; writes <out>.csv, <out>.json, and checkpoints.
        #[arg(long, default_value = "runs/run")]
        out: PathBuf,
        /// Directory holding the IDX files named in the config.
        #[arg(long, default_value = "data/digits")]
        data_dir: PathBuf,
    },
    /// Run the config's [sweep] section, one thread per value.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
        #[arg(long, default_value = "data/digits")]
        data_dir: PathBuf,
    },
    /// Measure released-weight variance growth for both update rules on a
    /// zero-gradient problem.
    VarianceDemo {
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value_t = 1.0)]
        clip_norm: f64,
        #[arg(long, default_value_t = 1.0)]
        noise_multiplier: f64,
        #[arg(long, default_value_t = 32)]
        lot_size: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Write the per-step table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Privacy accounting: given --z report epsilon, given --target-eps
    /// calibrate the noise multiplier.
    Accountant {
        #[arg(long)]
        z: Option<f64>,
        #[arg(long)]
        target_eps: Option<f64>,
        /// Sampling rate L/N.
        #[arg(long)]
        q: f64,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
    },
    /// Combine metrics files into one comparison table.
    Report {
        /// Metrics summaries (.json, or .csv with a sidecar).
        files: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_result(result: &ExperimentResult) {
    for seed in &result.summary.seeds {
        let status = if seed.converged {
            "converged".to_string()
        } else {
            format!("non-convergence ({})", seed.reason.as_deref().unwrap_or("unknown"))
        };
        match seed.epsilon {
            Some(eps) => println!(
                "seed {}: accuracy {:.4}, epsilon {eps}, {status}",
                seed.seed, seed.final_accuracy
            ),
            None => println!("seed {}: accuracy {:.4}, {status}", seed.seed, seed.final_accuracy),
        }
    }
    println!(
        "{} [{} / {}]: accuracy {} ({})",
        result.summary.run_id,
        result.summary.model,
        result.summary.optimizer,
        result.summary.accuracy_pm(),
        result.summary.outcome
    );
    println!("metrics: {}", result.csv_path.display());
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, seed, out, data_dir } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if let Some(seed) = seed {
                cfg.experiment.seeds = vec![seed];
            }
            let result = run_experiment(&cfg, &data_dir, &out)?;
            print_result(&result);
        }
        Command::Sweep { config, out, data_dir } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let results = run_sweep(&cfg, &data_dir, &out)?;
            for result in &results {
                print_result(result);
            }
        }
        Command::VarianceDemo {
            dim,
            steps,
            trials,
            clip_norm,
            noise_multiplier,
            lot_size,
            lr,
            seed,
            out,
        } => {
            let args = VarianceDemoArgs {
                dim,
                steps,
                trials,
                clip_norm,
                noise_multiplier,
                lot_size,
                lr,
                seed,
            };
            let demo = run_variance_demo(&args, out.as_deref())?;
            if out.is_none() {
                print!("{}", variance_demo_csv(&demo));
            }
            print!("{}", variance_demo_text(&demo));
        }
        Command::Accountant { z, target_eps, q, steps, delta } => {
            println!("{}", accountant_line(z, target_eps, q, steps, delta)?);
        }
        Command::Report { files, out } => {
            print!("{}", emit_report(&files, out.as_deref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
