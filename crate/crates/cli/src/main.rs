//! `advdet`: data generation, detector training, attacks and evaluation.
//!
//! Every subcommand reads an optional TOML configuration, applies
//! `--set key.path=value` overrides, and writes its outputs together with a
//! `config.toml` snapshot of the resolved configuration into `--out`.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advdet", version, about = "Adversarial textures against toy object detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults apply to absent keys.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set attack.epsilon=0.008`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory receiving every output.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic annotated dataset.
    GenerateData(Common),
    /// Train a toy detector on synthetic scenes.
    TrainDetector(Common),
    /// Optimize a texture across views, or attack single frames.
    Attack(Common),
    /// Detection rates of clean or attacked frames.
    Evaluate(Common),
    /// Detection rates under input-transform defenses.
    DefendEvaluate(Common),
    /// Rates of one texture on its source detector and a second detector.
    Transfer(Common),
    /// L1-regularized logistic regression of attack success on its factors.
    Regress(Common),
    /// Merge evaluation records and render the tables.
    Report(Common),
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenerateData(c) => commands::generate_data(config::load(c.config.as_deref(), &c.overrides)?, &c.out),
        Command::TrainDetector(c) => commands::train_detector(config::load(c.config.as_deref(), &c.overrides)?, &c.out),
        Command::Attack(c) => commands::attack(config::load(c.config.as_deref(), &c.overrides)?, &c.out),
        Command::Evaluate(c) => commands::run_evaluate(config::load(c.config.as_deref(), &c.overrides)?, &c.out, false),
        Command::DefendEvaluate(c) => {
            commands::run_evaluate(config::load(c.config.as_deref(), &c.overrides)?, &c.out, true)
        }
        Command::Transfer(c) => commands::transfer(config::load(c.config.as_deref(), &c.overrides)?, &c.out),
        Command::Regress(c) => commands::regress(config::load(c.config.as_deref(), &c.overrides)?, &c.out),
        Command::Report(c) => commands::report(config::load(c.config.as_deref(), &c.overrides)?, &c.out),
    }
}
