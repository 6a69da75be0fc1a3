use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use diffgate::checkpoint::{self, CheckpointError};
use diffgate::data::{self, DataError};
use diffgate::gates::UtilityMap;
use diffgate::sparsity::SparsityReport;
use diffgate::train::{self, CheckGradOptions, McConfig, RunReport, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "diffgate", version, about = "Train and prune gated networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config; writes reports and a checkpoint to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// 200 epochs over every available image instead of the desk-scale setting.
        #[arg(long)]
        full_protocol: bool,
    },
    /// Test error and loss of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with MNIST IDX files; the t10k split is used. Defaults to
        /// `$DIFFGATE_DATA_DIR`.
        #[arg(long, conflicts_with = "config")]
        data: Option<PathBuf>,
        /// Evaluate on the test split of this config's data source.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fold the gates and remove pruned units.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the full risk.
    CheckGrad {
        #[arg(long)]
        config: PathBuf,
        /// Training examples in the checked batch.
        #[arg(long, default_value_t = 16)]
        batch: usize,
    },
    /// Monte-Carlo check of the closed-form enable probabilities.
    McValidate {
        /// Comma-separated gate logits.
        #[arg(
            long,
            value_delimiter = ',',
            allow_hyphen_values = true,
            required = true
        )]
        mu: Vec<f64>,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        beta: f64,
        #[arg(long, default_value = "sigmoid")]
        utility: UtilityMap,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Effective (non-negative) ζ.
        #[arg(long, default_value_t = 0.0)]
        zeta: f64,
    },
    /// Print the report of a training run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

/// Exit status for failures, by category.
fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<TrainError>() {
        return match e {
            TrainError::Config(_) => 3,
            TrainError::Data(_) => 4,
            TrainError::Io { .. } => 5,
            TrainError::Checkpoint(_) | TrainError::Report(_) => 6,
            TrainError::NonFinite { .. } => 7,
            _ => 8,
        };
    }
    if err.downcast_ref::<DataError>().is_some() {
        return 4;
    }
    if err.downcast_ref::<CheckpointError>().is_some() {
        return 6;
    }
    8
}

fn print_json(v: serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            out,
            full_protocol,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if full_protocol {
                cfg = cfg.full_protocol();
            }
            let outcome = train::train(&cfg, Some(&out))?;
            print!("{}", outcome.report.render());
            Ok(true)
        }
        Command::Eval {
            checkpoint: path,
            data,
            config,
        } => {
            let model = checkpoint::load(&path)?;
            let test = match (config, data) {
                (Some(c), _) => {
                    let cfg = TrainConfig::load(&c)?;
                    cfg.data.load(&cfg.base_dir)?.1
                }
                (None, Some(dir)) => data::load_mnist_dir(&dir)?.1,
                (None, None) => match std::env::var_os(data::DATA_DIR_ENV) {
                    Some(dir) => data::load_mnist_dir(&PathBuf::from(dir))?.1,
                    None => bail!("eval needs --data, --config or ${}", data::DATA_DIR_ENV),
                },
            };
            let e = train::evaluate(&model, &test)?;
            print_json(serde_json::json!({
                "examples": test.len(),
                "test_error_pct": e.error_pct,
                "test_loss": e.mean_loss,
                "architecture": diffgate::sparsity::architecture_string(&model),
            }))?;
            Ok(true)
        }
        Command::Export {
            checkpoint: path,
            out,
        } => {
            let model = checkpoint::load(&path)?;
            let before = SparsityReport::of(&model);
            let pruned = model.prune_export().context("export failed")?;
            checkpoint::save(&pruned, &out)?;
            print_json(serde_json::json!({
                "architecture": before.architecture,
                "parameters_before": before.total_parameters,
                "parameters_after": pruned.parameter_count(),
                "flops_before": before.flop_estimate_forward,
                "flops_after": diffgate::sparsity::flop_estimate(&pruned, false),
                "out": out,
            }))?;
            Ok(true)
        }
        Command::CheckGrad { config, batch } => {
            let cfg = TrainConfig::load(&config)?;
            let start = Instant::now();
            let report = train::check_grad(
                &cfg,
                &CheckGradOptions {
                    batch,
                    ..CheckGradOptions::default()
                },
            )?;
            print_json(serde_json::to_value(&report)?)?;
            eprintln!(
                "check-grad: {} ({} coordinates, {} near kinks, max rel err {:.3e}, {:.1} s)",
                if report.passed { "PASS" } else { "FAIL" },
                report.checked,
                report.excluded_kink,
                report.max_rel_err,
                start.elapsed().as_secs_f64()
            );
            Ok(report.passed)
        }
        Command::McValidate {
            mu,
            sigma,
            beta,
            utility,
            samples,
            seed,
            zeta,
        } => {
            let cfg = McConfig {
                mu,
                sigma,
                beta,
                zeta,
                utility,
            };
            let report = train::mc_validate(&cfg, samples, seed)?;
            for c in &report.claims {
                println!(
                    "{} {:<14} observed {:.6} expected {:.6} tolerance {:.3e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.observed,
                    c.expected,
                    c.tolerance
                );
            }
            Ok(report.passed)
        }
        Command::Report { run } => {
            print!("{}", RunReport::read(&run)?.render());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
