//! `tphd`: generate synthetic hidden-state datasets, train and evaluate
//! token-level hallucination probes, ablate the loss terms, and search for
//! the best probe layer.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure
//! during optimization.

mod commands;
mod config;

use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand};

use commands::SplitSel;

#[derive(Parser)]
#[command(name = "tphd", version, about = "Token-level hallucination probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set loss.gamma_focal=1.5. Repeatable;
    /// applied in order after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Global seed; wins over the config file and --set.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts and the resolved config.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the `synth` config section.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a probe on a stored dataset; writes checkpoint, history, and
    /// validation metrics.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory (manifest.json + states.bin).
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        /// Layer to probe; wins over the config's probe.layer.
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Evaluate a stored checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        /// Probe checkpoint written by `train`.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Which side of the seeded split to evaluate.
        #[arg(long, value_enum, default_value = "val")]
        split: SplitSel,
    },
    /// Bayesian-optimization search for the best probe layer.
    LayerSearch {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
    },
    /// Train the full loss and four leave-one-out variants with a shared
    /// seed; emits the per-component ablation table.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
    },
}

fn run(cli: Cli) -> tphd::Result<()> {
    match cli.command {
        Command::Gen { common } => {
            let cfg = config::load_config(common.config.as_deref(), &common.set, common.seed)?;
            commands::cmd_gen(&cfg, &common.out)
        }
        Command::Train { common, dataset, layer } => {
            let cfg = config::load_config(common.config.as_deref(), &common.set, common.seed)?;
            commands::cmd_train(&cfg, &dataset, &common.out, layer)
        }
        Command::Eval { common, dataset, checkpoint, split } => {
            let cfg = config::load_config(common.config.as_deref(), &common.set, common.seed)?;
            commands::cmd_eval(&cfg, &dataset, &checkpoint, &common.out, split)
        }
        Command::LayerSearch { common, dataset } => {
            let cfg = config::load_config(common.config.as_deref(), &common.set, common.seed)?;
            commands::cmd_layer_search(&cfg, &dataset, &common.out)
        }
        Command::Ablate { common, dataset } => {
            let cfg = config::load_config(common.config.as_deref(), &common.set, common.seed)?;
            commands::cmd_ablate(&cfg, &dataset, &common.out)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        process::exit(err.exit_code());
    }
}
