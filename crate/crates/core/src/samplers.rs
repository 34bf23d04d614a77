//! Posterior draws from trained flows and a Langevin reference sampler.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::flows::ConditionalSampler;
use crate::problem::standard_normal;

/// `n` posterior draws `T(z)`, `z ~ N(0, I)`.
pub fn flow_samples<R: Rng + ?Sized>(
    sampler: &ConditionalSampler,
    y: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Usage("flow_samples needs n >= 1".into()));
    }
    let z = standard_normal(rng, n, sampler.model_dim());
    sampler.sample(y, &z)
}

/// Langevin settings with step sizes `eps_t = step_a * (step_b + t)^(-step_gamma)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgldConfig {
    pub n_steps: usize,
    pub step_a: f64,
    pub step_b: f64,
    pub step_gamma: f64,
    pub burn_in: usize,
    pub stride: usize,
    /// Set to `false` to drop the injected noise (plain gradient ascent).
    pub inject_noise: bool,
}

impl Default for SgldConfig {
    /// Step size 0.1 decaying to about 0.046 over the run, keeping 10^5
    /// samples after a burn-in of 5 * 10^4 steps.
    fn default() -> Self {
        Self {
            n_steps: 3_050_000,
            step_a: 0.1 * 1e6f64.powf(0.55),
            step_b: 1e6,
            step_gamma: 0.55,
            burn_in: 50_000,
            stride: 30,
            inject_noise: true,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_gamma > 0.5 && self.step_gamma <= 1.0) {
            return Err(Error::Usage(format!("step_gamma must lie in (0.5, 1], got {}", self.step_gamma)));
        }
        if !(self.step_a > 0.0 && self.step_a.is_finite() && self.step_b >= 0.0 && self.step_b.is_finite()) {
            return Err(Error::Usage(format!(
                "need step_a > 0 and step_b >= 0, got {} and {}",
                self.step_a, self.step_b
            )));
        }
        if self.n_steps <= self.burn_in {
            return Err(Error::Usage(format!(
                "n_steps ({}) must exceed burn_in ({})",
                self.n_steps, self.burn_in
            )));
        }
        if self.stride == 0 {
            return Err(Error::Usage("stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn step_size(&self, t: usize) -> f64 {
        self.step_a * (self.step_b + t as f64).powf(-self.step_gamma)
    }

    pub fn retained(&self) -> usize {
        (self.n_steps - self.burn_in) / self.stride
    }
}

/// Thinned Langevin chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    samples: Tensor,
    config: SgldConfig,
    seed: Option<u64>,
}

impl Chain {
    /// Retained states as `[n, d]`.
    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn config(&self) -> &SgldConfig {
        &self.config
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn len(&self) -> usize {
        self.samples.dims2().map_or(0, |(n, _)| n)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Step size used at step `t`.
    pub fn step_size(&self, t: usize) -> f64 {
        self.config.step_size(t)
    }

    /// CSV with columns `x1,x2,...`, one retained state per row.
    pub fn to_csv(&self) -> String {
        let (_, d) = self.samples.dims2().expect("matrix");
        let cols: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        let mut out = cols.join(",");
        out.push('\n');
        for r in self.samples.rows() {
            let vals: Vec<String> = r.iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(out, "{}", vals.join(","));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Runs `x_{t+1} = x_t + (eps_t / 2) grad log pi(x_t) + eta_t`,
/// `eta_t ~ N(0, eps_t I)`, and keeps every `stride`-th state after
/// `burn_in` steps.
pub fn sgld<F, R>(mut grad: F, x0: &[f64], config: &SgldConfig, rng: &mut R) -> Result<Chain>
where
    F: FnMut(&[f64]) -> Vec<f64>,
    R: Rng + ?Sized,
{
    config.validate()?;
    let d = x0.len();
    if d == 0 || !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::Usage(format!("invalid initial state {x0:?}")));
    }
    let mut x = x0.to_vec();
    let mut kept = Vec::with_capacity(config.retained() * d);
    for t in 0..config.n_steps {
        let eps = config.step_size(t);
        let g = grad(&x);
        if g.len() != d {
            return Err(Error::dim("sgld", format!("gradient has {} entries, state has {d}", g.len())));
        }
        let sd = eps.sqrt();
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi += 0.5 * eps * gi;
            if config.inject_noise {
                let e: f64 = StandardNormal.sample(rng);
                *xi += sd * e;
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("sgld: non-finite state at step {t}")));
        }
        let done = t + 1;
        if done > config.burn_in && (done - config.burn_in).is_multiple_of(config.stride) {
            kept.extend_from_slice(&x);
        }
    }
    let n = kept.len() / d;
    Ok(Chain {
        samples: Tensor::matrix(n, d, kept)?,
        config: *config,
        seed: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::ConditionalArch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quick() -> SgldConfig {
        SgldConfig {
            n_steps: 1000,
            step_a: 0.01,
            step_b: 100.0,
            step_gamma: 0.55,
            burn_in: 100,
            stride: 7,
            inject_noise: true,
        }
    }

    #[test]
    fn retained_count_matches_formula() {
        let cfg = quick();
        let chain = sgld(|x| x.iter().map(|v| -v).collect(), &[0.0, 0.0], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(chain.len(), (1000 - 100) / 7);
        assert_eq!(chain.len(), cfg.retained());
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = |x: &[f64]| x.to_vec();
        for cfg in [
            SgldConfig { step_gamma: 0.5, ..quick() },
            SgldConfig { step_gamma: 1.1, ..quick() },
            SgldConfig { burn_in: 1000, ..quick() },
            SgldConfig { stride: 0, ..quick() },
        ] {
            assert!(matches!(sgld(f, &[0.0], &cfg, &mut rng), Err(Error::Usage(_))));
        }
    }

    #[test]
    fn divergence_reports_step() {
        let cfg = SgldConfig { step_a: 1e3, ..quick() };
        let err = sgld(|x| x.iter().map(|v| v * v * v).collect(), &[1.0], &cfg, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(err.to_string().contains("step"), "{err}");
        assert!(err.is_numerical());
    }

    #[test]
    fn noiseless_chain_ascends() {
        let cfg = SgldConfig {
            inject_noise: false,
            burn_in: 0,
            stride: 1,
            ..quick()
        };
        let logp = |x: &[f64]| -(x[0] - 1.0).powi(2) - 3.0 * (x[1] + 0.5).powi(2);
        let chain = sgld(|x| vec![-2.0 * (x[0] - 1.0), -6.0 * (x[1] + 0.5)], &[-2.0, 2.0], &cfg, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let vals: Vec<f64> = chain.samples().rows().map(logp).collect();
        assert!(vals.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn chain_csv_and_reproducibility() {
        let cfg = quick();
        let run = |s| sgld(|x| x.iter().map(|v| -v).collect(), &[0.5, 0.5], &cfg, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        let csv = run(3).with_seed(3).to_csv();
        assert!(csv.starts_with("x1,x2\n"));
        assert_eq!(csv.lines().count(), 1 + cfg.retained());
    }

    #[test]
    fn identity_flow_samples_are_latents() {
        let s = ConditionalSampler::fresh(ConditionalArch { blocks: 2, hidden: 4, ..Default::default() }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = flow_samples(&s, &[0.1, 0.2], 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let z = standard_normal(&mut ChaCha8Rng::seed_from_u64(9), 5, 2);
        assert_eq!(x, z);
    }
}
