use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ssre::experiment::{self, RunConfig};

#[derive(Parser)]
#[command(name = "ssre", version, about = "Exemplar-free class-incremental training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every phase of the protocol and write the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, e.g. `--set train.sigma=0.6`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Check that fusing the adapters of an expanded checkpoint leaves its
    /// outputs unchanged.
    FuseCheck {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Maximum allowed deviation; defaults to 1e-5 (f32) or 1e-10 (f64).
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Average incremental accuracy for each routing threshold, as CSV.
    SweepSigma {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Reseeded runs averaged per value.
        #[arg(long, default_value_t = 1)]
        repeats: u64,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let cfg = RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    Ok(cfg.with_overrides(overrides)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let report = experiment::run(&cfg)?;
            for p in &report.phases {
                println!(
                    "phase {}: {} classes, overall accuracy {:.4}, parameters {}",
                    p.phase,
                    p.classes.len(),
                    p.overall_acc,
                    p.param_count
                );
            }
            println!("average incremental accuracy {:.4}", report.avg_incremental_accuracy);
            if let Some(f) = report.avg_forgetting {
                println!("average forgetting {f:.4}");
            }
            if let Some(dir) = &cfg.output_dir {
                println!("wrote {}", dir.display());
            }
        }
        Command::FuseCheck {
            checkpoint,
            trials,
            tol,
            seed,
        } => {
            let report = experiment::fuse_check(&checkpoint, trials, seed)
                .with_context(|| format!("checking {}", checkpoint.display()))?;
            let tol = tol.unwrap_or(if report.precision == "f64" { 1e-10 } else { 1e-5 });
            println!(
                "{} trials ({}): max |expanded - fused| = {:e}",
                report.trials, report.precision, report.max_abs_diff
            );
            if report.max_abs_diff.is_nan() || report.max_abs_diff > tol {
                bail!("deviation {:e} exceeds tolerance {tol:e}", report.max_abs_diff);
            }
        }
        Command::SweepSigma {
            config,
            values,
            repeats,
            overrides,
            out,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let points = experiment::sweep_sigma(&cfg, &values, repeats)?;
            let mut csv = String::from("sigma,avg_inc_acc\n");
            for (s, a) in points {
                csv.push_str(&format!("{s},{a}\n"));
            }
            match out {
                Some(path) => std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::default())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
