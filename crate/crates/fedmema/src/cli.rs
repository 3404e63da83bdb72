//! Command-line interface.
//!
//! Exit codes: 0 success, 2 configuration error, 3 aborted on a non-finite
//! value, 1 anything else.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::ablate;
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::fed;

#[derive(Debug, Parser)]
#[command(
    name = "fedmema",
    about = "Desk-scale federated multimodal segmentation with multi-anchor prototype calibration",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (TOML).
    pub config: PathBuf,
    /// Override a config key, e.g. `--set optim.lr=0.001` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one federated experiment and write its run directory.
    Run(ConfigArgs),
    /// Run the six-row ablation ladder over several seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// How many consecutive seeds to run, starting at `data.seed`.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Re-run the experiment for each value of one config key.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dotted config key, e.g. `anchors.n_k`.
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. `1,3,5`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Export anchor attention maps from a finished run directory.
    ExportAttn {
        /// A run directory previously written by `run`.
        run_dir: PathBuf,
    },
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig> {
    ExperimentConfig::load_with_overrides(&args.config, &args.sets)
}

/// Execute a parsed command. Callers map the error to an exit code.
pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = load(&args)?;
            let art = fed::execute(&cfg)?;
            println!(
                "run `{}` ({}) finished after {} rounds",
                art.summary.experiment, art.summary.mode, art.summary.rounds
            );
            println!(
                "server mDSC {:.4} | mean client mDSC {:.4}",
                art.summary.server_mdsc, art.summary.mean_client_mdsc
            );
            for c in &art.summary.per_client {
                println!(
                    "  site {} ({:>5}): mDSC {:.4}  per-class {:?}",
                    c.id,
                    c.modality,
                    c.mdsc,
                    c.per_class_dsc.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
                );
            }
            println!("artifacts: {}", art.run_dir.display());
            Ok(())
        }
        Command::Ablate { config, seeds } => {
            let cfg = load(&config)?;
            let seed_list = ablate::ablation_seeds(&cfg, seeds.max(1));
            let report = ablate::run_ablation(&cfg, &seed_list)?;
            print!("{}", report.table());
            println!("report: {}", cfg.run_dir().join("ablation.json").display());
            Ok(())
        }
        Command::Sweep { config, param, values } => {
            let cfg = load(&config)?;
            let report = ablate::run_sweep(&cfg, &param, &values)?;
            print!("{}", report.table());
            println!("report: {}", cfg.run_dir().join("sweep.json").display());
            Ok(())
        }
        Command::ExportAttn { run_dir } => {
            let out = fed::export_attention(&run_dir)?;
            println!("attention maps: {}", out.display());
            Ok(())
        }
    }
}
