use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dynsel::harness::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "dynsel", version, about = "Reward-driven modality selection under missing and recovered inputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed and evaluates that seed only.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also write per-sample selection traces.
    #[arg(long, global = true)]
    trace: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, prototype bank and training log.
    Train,
    /// Evaluate trained artifacts over the configured grid.
    Eval,
    /// Train per seed and sweep the oracle correct-recovery rate.
    SweepNoisyRecovery,
    /// Check the information bound on random discrete distributions.
    MiBoundCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Report the per-sample test loss spread of trained artifacts.
    LossRange {
        /// Defaults to the configured value.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Generate the configured synthetic dataset.
    GenData,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_deref().context("--config is required for this command")?;
    let config = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(match cli.seed {
        Some(s) => config.with_seed(s),
        None => config,
    })
}

fn done(out: &Path, what: &str) {
    println!("{what} written to {}", out.display());
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let out = cli.out.as_path();
    match &cli.command {
        Command::Train => {
            let art = harness::cmd_train(&load_config(&cli)?, out)?;
            match art.log.last() {
                Some(last) => {
                    println!("trained {} epochs, last validation accuracy {:.4}", art.log.len(), last.val_acc)
                }
                None => println!("trained 0 epochs"),
            }
            done(out, "artifacts");
        }
        Command::Eval => {
            let report = harness::cmd_eval(&load_config(&cli)?, out, cli.trace)?;
            print!("{}", harness::encode_csv(&report.rows));
        }
        Command::SweepNoisyRecovery => {
            let sweep = harness::cmd_sweep_noisy_recovery(&load_config(&cli)?, out, cli.trace)?;
            print!("{}", harness::encode_csv(&sweep.report.rows));
            for f in &sweep.full {
                println!("seed {} full-modality accuracy {:.4}", f.seed, f.accuracy);
            }
        }
        Command::MiBoundCheck { trials } => {
            let report = harness::cmd_mi_bound_check(*trials, cli.seed.unwrap_or(0), out)?;
            println!("{}", mi_summary(&report));
            if !report.passed {
                anyhow::bail!("{} of {} trials violated the bound", report.violations, report.trials);
            }
        }
        Command::LossRange { delta } => {
            let config = load_config(&cli)?;
            let report = harness::cmd_loss_range(&config, out, delta.unwrap_or(config.eval.delta))?;
            println!(
                "ce min {:.6} max {:.6} mean {:.6}, concentration term {:.6} (n = {}, delta = {})",
                report.ce_min, report.ce_max, report.ce_mean, report.hoeffding_term, report.n, report.delta
            );
        }
        Command::GenData => {
            let path = harness::cmd_gen_data(&load_config(&cli)?, out)?;
            done(&path, "dataset");
        }
    }
    Ok(())
}

fn mi_summary(report: &harness::MiBoundReport) -> String {
    format!(
        "trials {} violations {} max gap {:.3e} equality residual {:.3e} passed {}",
        report.trials, report.violations, report.max_gap, report.max_equality_residual, report.passed
    )
}
