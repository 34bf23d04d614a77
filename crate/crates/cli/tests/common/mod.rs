#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use mfviflow_cli::ExperimentConfig;

/// A configuration small enough to run every command in seconds.
pub fn small_config(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        output_dir: out.to_path_buf(),
        gammas: vec![3.0, 0.0],
        ..Default::default()
    };
    c.n_latent = 128;
    c.architecture.blocks = 2;
    c.architecture.hidden = 8;
    c.pretrain.n_pairs = 400;
    c.pretrain.epochs = 2;
    c.finetune.epochs = 1;
    c.scratch.epochs = 2;
    c.evaluation.n_kl = 10_000;
    c.evaluation.n_samples = 200;
    c.evaluation.grid_n = 41;
    c.evaluation.chain_batches = 10;
    c.sgld.n_steps = 60_000;
    c.sgld.burn_in = 10_000;
    c.sgld.stride = 5;
    c.sweep.replicates = 2;
    c
}

pub fn write_config(cfg: &ExperimentConfig, path: &Path) {
    std::fs::write(path, cfg.to_toml()).unwrap();
}

pub fn mfviflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfviflow")).args(args).output().unwrap()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}
