//! Training objectives and loops: conditional maximum likelihood for the
//! joint flow, the variational (reverse-KL) objective for a posterior
//! sampler, and preconditioned fine-tuning against a frozen conditional
//! prior.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{lr_schedule, Adam, AdamConfig, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::flows::{standard_normal_logpdf, ConditionalFlow, ConditionalSampler, FlowStack, FrozenPrior};
use crate::metrics::TrainingTrace;
use crate::problem::{rosenbrock_logpdf_graph, standard_normal, ForwardOperator};

/// Isotropic Gaussian noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    sigma: f64,
}

impl NoiseModel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Usage(format!("noise sigma must be > 0, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Prior log-density used inside the variational objective.
#[derive(Debug, Clone)]
pub enum PriorDensity {
    /// `N(0, I)` including its normalizing constant.
    StandardNormal,
    /// Unnormalized Rosenbrock density.
    Rosenbrock,
    /// Frozen pretrained conditional flow evaluated at observation `y`.
    Conditional { prior: FrozenPrior, y: Vec<f64> },
    /// Another prior plus a constant log-offset.
    Shifted(Box<PriorDensity>, f64),
}

impl PriorDensity {
    pub fn conditional(prior: FrozenPrior, y: &[f64]) -> Self {
        PriorDensity::Conditional { prior, y: y.to_vec() }
    }

    /// Per-row log-density of a `[batch, d]` graph value.
    pub fn log_density_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            PriorDensity::StandardNormal => standard_normal_logpdf(g, x),
            PriorDensity::Rosenbrock => rosenbrock_logpdf_graph(g, x),
            PriorDensity::Conditional { prior, y } => {
                let batch = g.value(x).dims2().map_or(0, |(b, _)| b);
                let vars = prior.bind(g)?;
                let c = g.constant(Tensor::repeat_row(&prior.condition(y)?, batch))?;
                prior.log_prob_graph(g, &vars, c, x)
            }
            PriorDensity::Shifted(inner, k) => {
                let lp = inner.log_density_graph(g, x)?;
                g.add_scalar(lp, *k)
            }
        }
    }

    pub fn log_density(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let lp = self.log_density_graph(&mut g, xv)?;
        Ok(g.value(lp).data().to_vec())
    }
}

/// Mean over the batch of `||G(y, x)||^2 / 2 - log|det grad G(y, x)|`.
pub fn mle_loss_graph(
    flow: &ConditionalFlow,
    g: &mut Graph,
    data_vars: &[Var],
    model_vars: &[Var],
    y: Var,
    x: Var,
) -> Result<Var> {
    let (zy, zx, logdet) = flow.forward_graph(g, data_vars, model_vars, y, x)?;
    let ny = g.row_sq_norm(zy)?;
    let nx = g.row_sq_norm(zx)?;
    let n = g.add(ny, nx)?;
    let half = g.scale(n, 0.5)?;
    let per_row = g.sub(half, logdet)?;
    g.mean(per_row)
}

fn check_batch(op: &'static str, y: &Tensor, x: &Tensor) -> Result<()> {
    match (y.dims2(), x.dims2()) {
        (Some((a, _)), Some((b, _))) if a == b && a > 0 => Ok(()),
        _ => Err(Error::Usage(format!(
            "{op}: need a nonempty batch of matching (y, x) rows, got {:?} and {:?}",
            y.shape(),
            x.shape()
        ))),
    }
}

pub fn mle_loss(flow: &ConditionalFlow, y: &Tensor, x: &Tensor) -> Result<f64> {
    check_batch("mle_loss", y, x)?;
    let mut g = Graph::new();
    let dv = flow.data_lane().bind(&mut g, false)?;
    let mv = flow.model_lane().bind(&mut g, false)?;
    let yv = g.constant(y.clone())?;
    let xv = g.constant(x.clone())?;
    let loss = mle_loss_graph(flow, &mut g, &dv, &mv, yv, xv)?;
    Ok(g.value(loss).item())
}

/// Loss and gradients `(d/d data lane, d/d model lane)`.
pub fn mle_loss_and_grad(
    flow: &ConditionalFlow,
    y: &Tensor,
    x: &Tensor,
) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
    check_batch("mle_loss", y, x)?;
    let mut g = Graph::new();
    let dv = flow.data_lane().bind(&mut g, true)?;
    let mv = flow.model_lane().bind(&mut g, true)?;
    let yv = g.constant(y.clone())?;
    let xv = g.constant(x.clone())?;
    let loss = mle_loss_graph(flow, &mut g, &dv, &mv, yv, xv)?;
    g.backward(loss)?;
    Ok((
        g.value(loss).item(),
        flow.data_lane().params().collect_grads(&g, &dv),
        flow.model_lane().params().collect_grads(&g, &mv),
    ))
}

/// Conditional prior log-density `log N(G_x(x; z_y); 0, I) + log|det dG_x/dx|`
/// at each row of `x`.
pub fn conditional_prior_logprob(prior: &FrozenPrior, y: &[f64], x: &Tensor) -> Result<Vec<f64>> {
    prior.log_prob(y, x)
}

/// Everything the variational objective needs besides the sampler weights.
#[derive(Debug, Clone, Copy)]
pub struct ViProblem<'a> {
    pub operator: &'a ForwardOperator,
    pub y: &'a [f64],
    pub prior: &'a PriorDensity,
    pub noise: NoiseModel,
}

/// Per-row integrand
/// `||F(T(z)) - y||^2 / (2 sigma^2) - log prior(T(z)) - log|det dT/dz|`.
pub fn vi_integrand_graph(
    g: &mut Graph,
    lane: &FlowStack,
    vars: &[Var],
    cond: &[f64],
    problem: &ViProblem<'_>,
    z: &Tensor,
) -> Result<Var> {
    let (b, _) = z
        .dims2()
        .ok_or_else(|| Error::dim("vi_loss", format!("latents must be a matrix, got {:?}", z.shape())))?;
    if problem.y.len() != problem.operator.out_dim() {
        return Err(Error::dim(
            "vi_loss",
            format!("observation has {} entries, operator produces {}", problem.y.len(), problem.operator.out_dim()),
        ));
    }
    let zv = g.constant(z.clone())?;
    let c = g.constant(Tensor::repeat_row(cond, b))?;
    let (x, logdet) = lane.inverse_graph(g, vars, zv, Some(c))?;
    let fx = problem.operator.apply_graph(g, x)?;
    let neg_y = g.constant(Tensor::vector(problem.y.iter().map(|v| -v).collect()))?;
    let resid = g.add_row(fx, neg_y)?;
    let sq = g.row_sq_norm(resid)?;
    let sigma = problem.noise.sigma();
    let lik = g.scale(sq, 0.5 / (sigma * sigma))?;
    let lp = problem.prior.log_density_graph(g, x)?;
    let t = g.sub(lik, lp)?;
    g.sub(t, logdet)
}

/// Monte Carlo mean of the variational integrand over the rows of `z`.
pub fn vi_loss(sampler: &ConditionalSampler, problem: &ViProblem<'_>, z: &Tensor) -> Result<f64> {
    let cond = sampler.condition(problem.y)?;
    let mut g = Graph::new();
    let vars = sampler.model_lane().bind(&mut g, false)?;
    let per_row = vi_integrand_graph(&mut g, sampler.model_lane(), &vars, &cond, problem, z)?;
    let loss = g.mean(per_row)?;
    Ok(g.value(loss).item())
}

/// Per-row integrand values, without averaging.
pub fn vi_integrand(sampler: &ConditionalSampler, problem: &ViProblem<'_>, z: &Tensor) -> Result<Vec<f64>> {
    let cond = sampler.condition(problem.y)?;
    let mut g = Graph::new();
    let vars = sampler.model_lane().bind(&mut g, false)?;
    let per_row = vi_integrand_graph(&mut g, sampler.model_lane(), &vars, &cond, problem, z)?;
    Ok(g.value(per_row).data().to_vec())
}

pub fn vi_loss_and_grad(
    sampler: &ConditionalSampler,
    problem: &ViProblem<'_>,
    z: &Tensor,
) -> Result<(f64, Vec<Tensor>)> {
    let cond = sampler.condition(problem.y)?;
    vi_step_grad(sampler.model_lane(), &cond, problem, z)
}

fn vi_step_grad(lane: &FlowStack, cond: &[f64], problem: &ViProblem<'_>, z: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = lane.bind(&mut g, true)?;
    let per_row = vi_integrand_graph(&mut g, lane, &vars, cond, problem, z)?;
    let loss = g.mean(per_row)?;
    g.backward(loss)?;
    Ok((g.value(loss).item(), lane.params().collect_grads(&g, &vars)))
}

/// Mini-batch Adam settings with per-epoch exponential learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay: f64,
}

impl TrainConfig {
    /// 25 epochs, batch 64, learning rate 1e-3 decayed by 0.9 per epoch.
    pub fn pretrain_default() -> Self {
        Self {
            epochs: 25,
            batch_size: 64,
            learning_rate: 1e-3,
            decay: 0.9,
        }
    }

    /// Preconditioned fine-tuning: 5 epochs, batch 64, learning rate 1e-3.
    pub fn finetune_default() -> Self {
        Self {
            epochs: 5,
            ..Self::pretrain_default()
        }
    }

    /// From-scratch variational baseline: 25 epochs.
    pub fn scratch_default() -> Self {
        Self::pretrain_default()
    }

    pub fn validate(&self, n_samples: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Usage("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Usage(format!(
                "need learning rate > 0 and decay in (0, 1], got {} and {}",
                self.learning_rate, self.decay
            )));
        }
        if n_samples < self.batch_size {
            return Err(Error::Usage(format!(
                "training set of {n_samples} is smaller than batch size {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let (_, c) = t.dims2().expect("matrix");
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), c, data).expect("nonempty batch")
}

fn with_step_context(phase: &str, epoch: usize, step: usize, err: Error) -> Error {
    if err.is_numerical() {
        Error::Numerical(format!("{phase}: epoch {epoch}, step {step}: {err}"))
    } else {
        err
    }
}

/// Shuffled mini-batch loop shared by both trainers. `step_fn` returns the
/// batch objective after applying its update.
fn run_epochs(
    phase: &str,
    n: usize,
    config: &TrainConfig,
    seed: u64,
    mut step_fn: impl FnMut(&[usize], f64) -> Result<f64>,
) -> Result<TrainingTrace> {
    config.validate(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = TrainingTrace::new();
    let start = Instant::now();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config.learning_rate, config.decay);
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let objective =
                step_fn(batch, lr).map_err(|e| with_step_context(phase, epoch + 1, step, e))?;
            trace.push(phase, epoch + 1, step, objective, lr, start.elapsed().as_secs_f64())?;
        }
    }
    Ok(trace)
}

/// Maximum-likelihood pretraining of both lanes on joint `(y, x)` pairs.
pub fn train_mle(
    flow: &mut ConditionalFlow,
    y: &Tensor,
    x: &Tensor,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainingTrace> {
    check_batch("train_mle", y, x)?;
    let n = y.dims2().unwrap().0;
    let adam_cfg = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut opt_data = Adam::new(adam_cfg, flow.data_lane().params().tensors());
    let mut opt_model = Adam::new(adam_cfg, flow.model_lane().params().tensors());
    run_epochs("pretrain", n, config, seed, |batch, lr| {
        let yb = gather_rows(y, batch);
        let xb = gather_rows(x, batch);
        let (loss, gd, gm) = mle_loss_and_grad(flow, &yb, &xb)?;
        opt_data.set_learning_rate(lr);
        opt_model.set_learning_rate(lr);
        opt_data.step(flow.data_lane_mut().params_mut().tensors_mut(), &gd)?;
        opt_model.step(flow.model_lane_mut().params_mut().tensors_mut(), &gm)?;
        Ok(loss)
    })
}

/// Variational training of the sampler's model lane. `n_latent` standard
/// normal vectors are drawn once from `seed` and reshuffled every epoch.
pub fn train_vi(
    sampler: &mut ConditionalSampler,
    problem: &ViProblem<'_>,
    n_latent: usize,
    config: &TrainConfig,
    seed: u64,
    phase: &str,
) -> Result<TrainingTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if n_latent == 0 {
        return Err(Error::Usage("need at least one latent training sample".into()));
    }
    let latents = standard_normal(&mut rng, n_latent, sampler.model_dim());
    let cond = sampler.condition(problem.y)?;
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        sampler.model_lane().params().tensors(),
    );
    let shuffle_seed = rand::RngCore::next_u64(&mut rng);
    run_epochs(phase, n_latent, config, shuffle_seed, |batch, lr| {
        let zb = gather_rows(&latents, batch);
        let (loss, grads) = vi_step_grad(sampler.model_lane(), &cond, problem, &zb)?;
        opt.set_learning_rate(lr);
        opt.step(sampler.model_lane_mut().params_mut().tensors_mut(), &grads)?;
        Ok(loss)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::ConditionalArch;
    use std::f64::consts::PI;

    fn small_arch() -> ConditionalArch {
        ConditionalArch {
            blocks: 2,
            hidden: 8,
            ..Default::default()
        }
    }

    #[test]
    fn identity_flow_at_origin_has_zero_mle_loss() {
        let f = ConditionalFlow::new(small_arch(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let zero = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(mle_loss(&f, &zero, &zero).unwrap(), 0.0);
    }

    #[test]
    fn empty_or_mismatched_batches_are_rejected() {
        let f = ConditionalFlow::new(small_arch(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let b = Tensor::matrix(3, 2, vec![0.0; 6]).unwrap();
        assert!(matches!(mle_loss(&f, &a, &b), Err(Error::Usage(_))));
    }

    #[test]
    fn identity_prior_value_at_origin() {
        let f = ConditionalFlow::new(small_arch(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (_, p) = f.init_from_pretrained();
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let a = conditional_prior_logprob(&p, &[0.3, 0.1], &x).unwrap()[0];
        let b = conditional_prior_logprob(&p, &[-5.0, 2.0], &x).unwrap()[0];
        assert!((a + (2.0 * PI).ln()).abs() < 1e-15);
        assert_eq!(a, b);
        assert!((a - (-1.837877)).abs() < 1e-6);
    }

    #[test]
    fn noise_model_rejects_nonpositive_sigma() {
        assert!(NoiseModel::new(0.0).is_err());
        assert!(NoiseModel::new(-1.0).is_err());
        assert!(NoiseModel::new(f64::NAN).is_err());
    }

    #[test]
    fn train_config_validation() {
        let c = TrainConfig::pretrain_default();
        assert_eq!((c.epochs, c.batch_size, c.learning_rate, c.decay), (25, 64, 1e-3, 0.9));
        assert_eq!(TrainConfig::finetune_default().epochs, 5);
        assert_eq!(TrainConfig::scratch_default().epochs, 25);
        assert!(c.validate(63).is_err());
        assert!(TrainConfig { decay: 0.0, ..c }.validate(100).is_err());
    }
}
