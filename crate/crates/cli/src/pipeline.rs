//! The experiment stages, independent of file output.

use mfviflow::diff::Tensor;
use mfviflow::flows::{ConditionalFlow, ConditionalSampler};
use mfviflow::metrics::{grid_posterior_moments, kl_proxy, KlReport, MomentReport, TrainingTrace};
use mfviflow::objectives::{train_mle, train_vi, NoiseModel, PriorDensity, ViProblem};
use mfviflow::problem::{
    draw_gamma_matrix, generate_pairs, normalize_operator, observed_data, rosenbrock_sample, Dataset,
    ForwardOperator, ToyPosterior,
};
use mfviflow::samplers::{flow_samples, sgld, Chain};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{derive_seed, ExperimentConfig};
use crate::error::CliError;

// Stream tags under each sub-seed.
const DATA_PAIRS: u64 = 1;
const DATA_OPERATOR: u64 = 2;
const DATA_NOISE: u64 = 3;
const INIT_PRETRAIN: u64 = 1;
const INIT_SCRATCH: u64 = 2;
const TRAIN_PRETRAIN: u64 = 1;
const TRAIN_LATENTS: u64 = 2;
const EVAL_KL: u64 = 1;
const EVAL_SAMPLES: u64 = 2;
const EVAL_CHAIN: u64 = 3;

fn rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// Low-fidelity pairs: Rosenbrock draws observed through the identity.
pub fn low_fidelity_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let op = ForwardOperator::identity(2, cfg.sigma)?;
    Ok(generate_pairs(
        rosenbrock_sample,
        &op,
        cfg.pretrain.n_pairs,
        derive_seed(cfg.seeds.data, DATA_PAIRS),
        None,
    )?)
}

pub fn pretrain(cfg: &ExperimentConfig) -> Result<(ConditionalFlow, TrainingTrace, Dataset), CliError> {
    let data = low_fidelity_dataset(cfg)?;
    let mut flow = ConditionalFlow::new(cfg.arch(), &mut rng(cfg.seeds.init, INIT_PRETRAIN))?;
    let trace = train_mle(
        &mut flow,
        &data.y,
        &data.x,
        &cfg.pretrain.train_config(),
        derive_seed(cfg.seeds.train, TRAIN_PRETRAIN),
    )?;
    Ok((flow, trace, data))
}

/// Operator and observation for one value of gamma. The random matrix and
/// the observation noise depend only on the data seed, so every gamma in a
/// run shares them.
#[derive(Debug, Clone)]
pub struct HighFidelity {
    pub gamma: f64,
    pub matrix: [[f64; 2]; 2],
    pub operator: ForwardOperator,
    pub y: Vec<f64>,
}

impl HighFidelity {
    pub fn new(cfg: &ExperimentConfig, gamma: f64) -> Result<Self, CliError> {
        let gamma_matrix = draw_gamma_matrix(&mut rng(cfg.seeds.data, DATA_OPERATOR));
        let matrix = normalize_operator(&gamma_matrix, gamma)?;
        let operator = ForwardOperator::from_matrix(&matrix, cfg.sigma)?;
        let y = observed_data(&cfg.x_true, &operator, &mut rng(cfg.seeds.data, DATA_NOISE));
        Ok(Self {
            gamma,
            matrix,
            operator,
            y,
        })
    }

    pub fn posterior(&self) -> ToyPosterior {
        ToyPosterior {
            a: self.matrix,
            y: [self.y[0], self.y[1]],
            sigma: self.operator.sigma(),
        }
    }

    pub fn problem<'a>(&'a self, prior: &'a PriorDensity) -> Result<ViProblem<'a>, CliError> {
        Ok(ViProblem {
            operator: &self.operator,
            y: &self.y,
            prior,
            noise: NoiseModel::new(self.operator.sigma())?,
        })
    }
}

/// KL proxy against the analytic-prior objective. Every flow in a run is
/// scored on the same evaluation latents.
pub fn evaluate_kl(cfg: &ExperimentConfig, sampler: &ConditionalSampler, hf: &HighFidelity) -> Result<f64, CliError> {
    let prior = PriorDensity::Rosenbrock;
    let problem = hf.problem(&prior)?;
    Ok(kl_proxy(sampler, &problem, cfg.evaluation.n_kl, &mut rng(cfg.seeds.eval, EVAL_KL))?)
}

pub struct Finetuned {
    pub sampler: ConditionalSampler,
    pub trace: TrainingTrace,
    pub kl_before: f64,
    pub kl_after: f64,
}

/// Warm start from the pretrained flow with the frozen conditional prior.
pub fn finetune(cfg: &ExperimentConfig, flow: &ConditionalFlow, hf: &HighFidelity) -> Result<Finetuned, CliError> {
    let (mut sampler, frozen) = flow.init_from_pretrained();
    let kl_before = evaluate_kl(cfg, &sampler, hf)?;
    let prior = PriorDensity::conditional(frozen, &hf.y);
    let problem = hf.problem(&prior)?;
    let trace = train_vi(
        &mut sampler,
        &problem,
        cfg.n_latent,
        &cfg.finetune.train_config(),
        derive_seed(cfg.seeds.train, TRAIN_LATENTS),
        "finetune",
    )?;
    let kl_after = evaluate_kl(cfg, &sampler, hf)?;
    Ok(Finetuned {
        sampler,
        trace,
        kl_before,
        kl_after,
    })
}

pub struct Scratch {
    pub sampler: ConditionalSampler,
    pub trace: TrainingTrace,
    pub kl: f64,
}

/// Identity-initialized sampler trained against the analytic prior on the
/// same latent training set as [`finetune`].
pub fn scratch(cfg: &ExperimentConfig, hf: &HighFidelity) -> Result<Scratch, CliError> {
    let mut sampler = ConditionalSampler::fresh(cfg.arch(), &mut rng(cfg.seeds.init, INIT_SCRATCH))?;
    let prior = PriorDensity::Rosenbrock;
    let problem = hf.problem(&prior)?;
    let trace = train_vi(
        &mut sampler,
        &problem,
        cfg.n_latent,
        &cfg.scratch.train_config(),
        derive_seed(cfg.seeds.train, TRAIN_LATENTS),
        "scratch",
    )?;
    let kl = evaluate_kl(cfg, &sampler, hf)?;
    Ok(Scratch { sampler, trace, kl })
}

/// One KL-table row, or the reason it failed.
pub type SweepRow = Result<KlReport, (f64, u64, CliError)>;

/// Configurations for each sweep replicate: the given one, then base seeds
/// `seed + 1, seed + 2, ...`.
pub fn replicate_configs(cfg: &ExperimentConfig) -> Vec<ExperimentConfig> {
    (0..cfg.sweep.replicates)
        .map(|r| {
            let mut c = cfg.clone();
            if r > 0 {
                c.set_seed(cfg.seed + r);
            }
            c
        })
        .collect()
}

/// Pretrains once (the low-fidelity data do not depend on gamma), then
/// fine-tunes and trains from scratch for every gamma.
pub fn sweep_replicate(cfg: &ExperimentConfig) -> Vec<SweepRow> {
    let flow = match pretrain(cfg) {
        Ok((flow, _, _)) => flow,
        Err(e) => {
            let msg = e.to_string();
            return cfg
                .gammas
                .iter()
                .map(|&g| Err((g, cfg.seed, CliError::Numerical(format!("pretraining failed: {msg}")))))
                .collect();
        }
    };
    cfg.gammas
        .iter()
        .map(|&gamma| {
            let row = || -> Result<KlReport, CliError> {
                let hf = HighFidelity::new(cfg, gamma)?;
                let ft = finetune(cfg, &flow, &hf)?;
                let sc = scratch(cfg, &hf)?;
                let report = KlReport {
                    gamma,
                    kl_low: ft.kl_before,
                    kl_scratch: sc.kl,
                    kl_precond: ft.kl_after,
                    n_eval: cfg.evaluation.n_kl,
                    seed: cfg.seed,
                };
                report.validate()?;
                Ok(report)
            };
            row().map_err(|e| (gamma, cfg.seed, e))
        })
        .collect()
}

pub fn sweep(cfg: &ExperimentConfig) -> Vec<SweepRow> {
    replicate_configs(cfg).iter().flat_map(sweep_replicate).collect()
}

/// `n` posterior draws from a trained sampler.
pub fn posterior_samples(
    cfg: &ExperimentConfig,
    sampler: &ConditionalSampler,
    hf: &HighFidelity,
    n: usize,
) -> Result<Tensor, CliError> {
    Ok(flow_samples(sampler, &hf.y, n, &mut rng(cfg.seeds.eval, EVAL_SAMPLES))?)
}

/// Langevin chain on the analytic posterior, started at the origin.
pub fn posterior_chain(cfg: &ExperimentConfig, hf: &HighFidelity) -> Result<Chain, CliError> {
    let post = hf.posterior();
    let seed = derive_seed(cfg.seeds.eval, EVAL_CHAIN);
    let chain = sgld(
        |x| post.grad(x).to_vec(),
        &[0.0, 0.0],
        &cfg.sgld.config(),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )?;
    Ok(chain.with_seed(seed))
}

/// Quadrature moments of the analytic posterior on the evaluation grid.
pub fn grid_moments(cfg: &ExperimentConfig, hf: &HighFidelity) -> Result<MomentReport, CliError> {
    let post = hf.posterior();
    Ok(grid_posterior_moments(cfg.evaluation.grid(), |x| post.log_density(x))?)
}
