//! Command-line driver: dataset generation, training, evaluation, sweeps,
//! robustness studies and quantizer benchmarks.

pub mod commands;
pub mod config;
pub mod error;
pub mod policy;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tqdp_core::dp::CostModel;

pub use commands::Split;
pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "tqdp", version, about = "Triply quantized dynamic programming for transformer training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults reproduce the toy experiment.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `run.out_dir`).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Dataset seed (overrides `dataset.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum ensembles per stage (overrides `run.budget`).
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample inputs, label them with the target map, write dataset and manifest.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Solve the quantized control problem and write the open-loop policy.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Score a stored policy on a dataset split.
    Evaluate {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// exact, quantized (triply quantized) or state-quantized.
        #[arg(long, default_value = "exact")]
        model: String,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train at growing nested action levels and write a CSV table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Uses a freshly generated dataset when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated action levels, e.g. 10,20,30.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
    },
    /// Optimality gap against sample size on a fixed generative truth.
    Robustness {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sample sizes, e.g. 5,15,35.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// Empirical quantizer errors against their bounds.
    QuantizerBench {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn resolve(&self) -> Result<(RunConfig, PathBuf), CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.dataset.seed = seed;
        }
        if let Some(b) = self.budget {
            cfg.run.budget = Some(b);
        }
        cfg.validate()?;
        let out = self.out_dir.clone().unwrap_or_else(|| cfg.run.out_dir.clone());
        Ok((cfg, out))
    }
}

fn show(path: &Path) {
    println!("wrote {}", path.display());
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenerateData { common } => {
            let (cfg, out) = common.resolve()?;
            let (d, m) = commands::generate_data(&cfg, &out)?;
            show(&d);
            show(&m);
        }
        Command::Train { common, dataset } => {
            let (cfg, out) = common.resolve()?;
            let (p, report) = commands::train(&cfg, &dataset, &out)?;
            show(&p);
            println!(
                "quantized value {} (train {}, test {}) over {} states in {:.3}s",
                report.quantized_value,
                report.exact_train_error,
                report.exact_test_error,
                report.state_counts.iter().sum::<usize>(),
                report.wall_seconds
            );
        }
        Command::Evaluate {
            policy,
            dataset,
            model,
            split,
            out_dir,
        } => {
            let model: CostModel = model.parse()?;
            let m = commands::evaluate(&policy, &dataset, model, split, out_dir.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
        }
        Command::Sweep {
            common,
            dataset,
            levels,
        } => {
            let (cfg, out) = common.resolve()?;
            let levels = levels.unwrap_or_else(|| cfg.run.levels.clone());
            let (p, rows) = commands::sweep(&cfg, dataset.as_deref(), &levels, &out)?;
            for r in &rows {
                println!(
                    "level {:>4}  train {:.5}  test {:.5}  {:>8.3}s  {} states",
                    r.level, r.train_error, r.test_error, r.wall_seconds, r.state_count
                );
            }
            show(&p);
        }
        Command::Robustness { common, sizes } => {
            let (cfg, out) = common.resolve()?;
            let sizes = sizes.unwrap_or_else(|| cfg.run.sizes.clone());
            let (p, _) = commands::robustness(&cfg, &sizes, &out)?;
            show(&p);
        }
        Command::QuantizerBench { common } => {
            let (cfg, out) = common.resolve()?;
            let (p, _) = commands::quantizer_bench(&cfg, &out)?;
            show(&p);
        }
    }
    Ok(())
}
