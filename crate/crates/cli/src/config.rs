//! Experiment configuration: one TOML file with a section per phase.

use std::path::{Path, PathBuf};

use mfviflow::flows::ConditionalArch;
use mfviflow::metrics::{GridSpec, MIN_KL_SAMPLES};
use mfviflow::objectives::TrainConfig;
use mfviflow::problem::rosenbrock_sample;
use mfviflow::samplers::SgldConfig;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Independent seed derived from `base` on RNG stream `tag`. Values stay
/// below 2^63 so they survive a round trip through TOML integers.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(tag);
    rng.next_u64() >> 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Low-fidelity pairs, the random operator and the observation noise.
    pub data: u64,
    /// Network weight initialization.
    pub init: u64,
    /// Mini-batch shuffling and latent training sets.
    pub train: u64,
    /// KL evaluation latents, posterior samples and Langevin chains.
    pub eval: u64,
}

impl Seeds {
    pub fn from_base(base: u64) -> Self {
        Self {
            data: derive_seed(base, 1),
            init: derive_seed(base, 2),
            train: derive_seed(base, 3),
            eval: derive_seed(base, 4),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub clamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay: f64,
}

impl From<TrainConfig> for PhaseConfig {
    fn from(c: TrainConfig) -> Self {
        Self {
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            decay: c.decay,
        }
    }
}

impl PhaseConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            decay: self.decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub n_pairs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay: f64,
}

impl PretrainConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            decay: self.decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Latent draws per KL estimate.
    pub n_kl: usize,
    /// Posterior samples written by `sample`.
    pub n_samples: usize,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_n: usize,
    /// Batches for the batch-means standard errors of Langevin chains.
    pub chain_batches: usize,
}

impl EvalConfig {
    pub fn grid(&self) -> GridSpec {
        GridSpec::square(self.grid_lo, self.grid_hi, self.grid_n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgldSettings {
    pub n_steps: usize,
    pub step_a: f64,
    pub step_b: f64,
    pub step_gamma: f64,
    pub burn_in: usize,
    pub stride: usize,
}

impl SgldSettings {
    pub fn config(&self) -> SgldConfig {
        SgldConfig {
            n_steps: self.n_steps,
            step_a: self.step_a,
            step_b: self.step_b,
            step_gamma: self.step_gamma,
            burn_in: self.burn_in,
            stride: self.stride,
            inject_noise: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Number of consecutive base seeds, starting at `seed`.
    pub replicates: u64,
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// The first entry is used by the single-operator commands.
    pub gammas: Vec<f64>,
    pub sigma: f64,
    /// Ground-truth model behind the observation.
    pub x_true: [f64; 2],
    pub n_latent: usize,
    /// Base seed; `seeds` defaults to values derived from it.
    pub seed: u64,
    /// Write wall-clock seconds into trace files (breaks byte-identical reruns).
    pub record_time: bool,
    pub seeds: Seeds,
    pub architecture: ArchConfig,
    pub pretrain: PretrainConfig,
    pub finetune: PhaseConfig,
    pub scratch: PhaseConfig,
    pub evaluation: EvalConfig,
    pub sgld: SgldSettings,
    pub sweep: SweepConfig,
}

/// The default ground truth: the first draw of the exact Rosenbrock sampler
/// under seed 0.
pub fn default_x_true() -> [f64; 2] {
    let x = rosenbrock_sample(&mut ChaCha8Rng::seed_from_u64(0), 1);
    [x.data()[0], x.data()[1]]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let arch = ConditionalArch::default();
        let pre = TrainConfig::pretrain_default();
        Self {
            output_dir: PathBuf::from("out"),
            gammas: vec![3.0, 2.0, 1.0, 0.0],
            sigma: 0.4,
            x_true: default_x_true(),
            n_latent: 1000,
            seed: 0,
            record_time: false,
            seeds: Seeds::from_base(0),
            architecture: ArchConfig {
                blocks: arch.blocks,
                hidden: arch.hidden,
                clamp: arch.clamp,
            },
            pretrain: PretrainConfig {
                n_pairs: 5000,
                epochs: pre.epochs,
                batch_size: pre.batch_size,
                learning_rate: pre.learning_rate,
                decay: pre.decay,
            },
            finetune: TrainConfig::finetune_default().into(),
            scratch: TrainConfig::scratch_default().into(),
            evaluation: EvalConfig {
                n_kl: 20_000,
                n_samples: 1000,
                grid_lo: -4.0,
                grid_hi: 4.0,
                grid_n: 401,
                chain_batches: 50,
            },
            sgld: SgldSettings {
                n_steps: 2_050_000,
                step_a: 2e-3 * 1e7f64.powf(0.55),
                step_b: 1e7,
                step_gamma: 0.55,
                burn_in: 50_000,
                stride: 20,
            },
            sweep: SweepConfig { replicates: 1 },
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets the base seed and re-derives every sub-seed from it.
    pub fn set_seed(&mut self, base: u64) {
        self.seed = base;
        self.seeds = Seeds::from_base(base);
    }

    pub fn arch(&self) -> ConditionalArch {
        ConditionalArch {
            data_dim: 2,
            model_dim: 2,
            blocks: self.architecture.blocks,
            hidden: self.architecture.hidden,
            clamp: self.architecture.clamp,
        }
    }

    /// Operator parameter for the single-operator commands.
    pub fn primary_gamma(&self) -> f64 {
        self.gammas[0]
    }

    /// SHA-256 of the settings that determine results; the output
    /// directory is excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.record_time = false;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// One comment line naming the command, config hash and seeds.
    pub fn provenance(&self, command: &str) -> String {
        let s = &self.seeds;
        format!(
            "# mfviflow command={command} config_hash={} seed={} data_seed={} init_seed={} train_seed={} eval_seed={}",
            self.hash(),
            self.seed,
            s.data,
            s.init,
            s.train,
            s.eval
        )
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fin = |v: f64| v.is_finite();
        if self.gammas.is_empty() {
            return Err(usage("gammas must not be empty"));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(fin(**g) && **g >= 0.0)) {
            return Err(usage(format!("gamma must be finite and >= 0, got {g}")));
        }
        if !(self.sigma > 0.0 && fin(self.sigma)) {
            return Err(usage(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !self.x_true.iter().all(|v| fin(*v)) {
            return Err(usage("x_true must be finite"));
        }
        let a = &self.architecture;
        if a.blocks == 0 || a.hidden == 0 || !(a.clamp > 0.0 && fin(a.clamp)) {
            return Err(usage("architecture needs blocks, hidden >= 1 and clamp > 0"));
        }
        if self.pretrain.n_pairs == 0 || self.n_latent == 0 {
            return Err(usage("n_pairs and n_latent must be positive"));
        }
        self.pretrain
            .train_config()
            .validate(self.pretrain.n_pairs)
            .map_err(|e| usage(format!("[pretrain] {e}")))?;
        self.finetune
            .train_config()
            .validate(self.n_latent)
            .map_err(|e| usage(format!("[finetune] {e}")))?;
        self.scratch
            .train_config()
            .validate(self.n_latent)
            .map_err(|e| usage(format!("[scratch] {e}")))?;
        let e = &self.evaluation;
        if e.n_kl < MIN_KL_SAMPLES {
            return Err(usage(format!("evaluation.n_kl must be >= {MIN_KL_SAMPLES}")));
        }
        if e.n_samples == 0 || e.chain_batches < 2 {
            return Err(usage("evaluation needs n_samples >= 1 and chain_batches >= 2"));
        }
        e.grid().validate().map_err(|e| usage(format!("[evaluation] {e}")))?;
        self.sgld
            .config()
            .validate()
            .map_err(|e| usage(format!("[sgld] {e}")))?;
        if self.sgld.config().retained() < 2 * e.chain_batches {
            return Err(usage("sgld keeps too few samples for the batch-means error estimate"));
        }
        if self.sweep.replicates == 0 {
            return Err(usage("sweep.replicates must be >= 1"));
        }
        let max = i64::MAX as u64;
        let s = &self.seeds;
        if [self.seed, s.data, s.init, s.train, s.eval].iter().any(|&v| v > max) {
            return Err(usage(format!("seeds must not exceed {max}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.sigma = 0.5;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let text = ExperimentConfig::default().to_toml();
        assert!(ExperimentConfig::from_toml(&format!("bogus = 1\n{text}")).is_err());
        let bad = text.replacen("sigma = 0.4", "sigma = -1.0", 1);
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(CliError::Usage(_))));
    }

    #[test]
    fn derived_seeds_are_distinct_and_small() {
        let s = Seeds::from_base(0);
        let all = [s.data, s.init, s.train, s.eval];
        for (i, a) in all.iter().enumerate() {
            assert!(*a <= i64::MAX as u64);
            assert!(all[i + 1..].iter().all(|b| b != a));
        }
        assert_ne!(Seeds::from_base(1), s);
    }

    #[test]
    fn default_ground_truth_lies_inside_the_grid() {
        let x = default_x_true();
        assert!(x.iter().all(|v| v.abs() < 4.0));
    }
}
