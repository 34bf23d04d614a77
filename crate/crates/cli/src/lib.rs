//! Experiment driver: configuration, the pretrain / fine-tune / scratch
//! pipeline, the gamma sweep, sampling and Langevin reference chains.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mfviflow", version, about = "Multi-fidelity preconditioned flow training")]
pub struct Cli {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed; re-derives the data, init, train and eval seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Comma-separated operator parameters, e.g. `3,2,1,0`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub gamma: Option<Vec<f64>>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the conditional flow on low-fidelity pairs.
    Pretrain,
    /// Fine-tune a pretrained flow on the observation.
    Finetune {
        /// Defaults to `<out>/pretrain.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train a sampler from an identity initialization.
    Scratch,
    /// KL table over all gammas and sweep replicates.
    Sweep,
    /// Posterior samples and density grid from a trained flow.
    Sample {
        /// Defaults to `<out>/finetune.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Langevin chain and quadrature moments of the analytic posterior.
    Mcmc {
        /// Also report moments of this flow's samples.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Cli {
    /// Config file (or defaults) with flag overrides applied.
    pub fn effective_config(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(g) = &self.gamma {
            cfg.gammas = g.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs the parsed command and returns its report.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = cli.effective_config()?;
    if cli.print_config {
        return Ok(cfg.to_toml().trim_end().to_string());
    }
    let command = cli
        .command
        .as_ref()
        .ok_or_else(|| CliError::Usage("missing subcommand (try --help)".into()))?;
    match command {
        Command::Pretrain => commands::pretrain(&cfg),
        Command::Finetune { checkpoint } => commands::finetune(&cfg, checkpoint.as_deref()),
        Command::Scratch => commands::scratch(&cfg),
        Command::Sweep => commands::sweep(&cfg),
        Command::Sample { checkpoint, n } => commands::sample(&cfg, checkpoint.as_deref(), *n),
        Command::Mcmc { checkpoint } => commands::mcmc(&cfg, checkpoint.as_deref()),
    }
}
