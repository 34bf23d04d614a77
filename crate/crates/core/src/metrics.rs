//! Training traces, the KL proxy, moment diagnostics and density grids.

use std::fmt::Write as _;

use rand::Rng;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::flows::ConditionalSampler;
use crate::objectives::{vi_integrand, ViProblem};
use crate::problem::standard_normal;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub objective: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Per-step objective records, possibly spanning several phases.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingTrace {
    rows: Vec<TraceRow>,
}

impl TrainingTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends a row. Objectives must be finite and steps strictly increasing
    /// within a phase.
    pub fn push(
        &mut self,
        phase: &str,
        epoch: usize,
        step: usize,
        objective: f64,
        lr: f64,
        seconds: f64,
    ) -> Result<()> {
        if !objective.is_finite() {
            return Err(Error::Numerical(format!(
                "{phase}: non-finite objective {objective} at epoch {epoch}, step {step}"
            )));
        }
        if let Some(prev) = self.rows.iter().rev().find(|r| r.phase == phase) {
            if step <= prev.step {
                return Err(Error::Usage(format!(
                    "{phase}: step {step} does not follow step {}",
                    prev.step
                )));
            }
        }
        self.rows.push(TraceRow {
            phase: phase.to_string(),
            epoch,
            step,
            objective,
            lr,
            seconds,
        });
        Ok(())
    }

    pub fn extend(&mut self, other: TrainingTrace) -> Result<()> {
        for r in other.rows {
            self.push(&r.phase, r.epoch, r.step, r.objective, r.lr, r.seconds)?;
        }
        Ok(())
    }

    /// Mean objective per epoch of `phase`, in epoch order.
    pub fn epoch_means(&self, phase: &str) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.phase == phase) {
            match out.last_mut() {
                Some((e, s, n)) if *e == r.epoch => {
                    *s += r.objective;
                    *n += 1;
                }
                _ => out.push((r.epoch, r.objective, 1)),
            }
        }
        out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
    }

    /// CSV `phase,epoch,step,objective,lr,seconds`. Wall-clock time is
    /// written only when `with_seconds` is set; otherwise the column is empty
    /// so that reruns are byte-identical.
    pub fn to_csv(&self, with_seconds: bool) -> String {
        let mut out = String::from("phase,epoch,step,objective,lr,seconds\n");
        for r in &self.rows {
            let secs = if with_seconds { format!("{:.6}", r.seconds) } else { String::new() };
            let _ = writeln!(
                out,
                "{},{},{},{:.16e},{:.16e},{secs}",
                r.phase, r.epoch, r.step, r.objective, r.lr
            );
        }
        out
    }
}

/// `x` rounded to four significant digits.
pub fn sig4(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..6).contains(&mag) {
        format!("{:.*}", (3 - mag).max(0) as usize, x)
    } else {
        format!("{x:.3e}")
    }
}

/// One row of the KL table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlReport {
    pub gamma: f64,
    pub kl_low: f64,
    pub kl_scratch: f64,
    pub kl_precond: f64,
    pub n_eval: usize,
    pub seed: u64,
}

impl KlReport {
    pub const CSV_HEADER: &'static str = "gamma,kl_low,kl_scratch,kl_precond,n_eval,seed";

    pub fn validate(&self) -> Result<()> {
        if self.n_eval < MIN_KL_SAMPLES {
            return Err(Error::Usage(format!(
                "KL reports need at least {MIN_KL_SAMPLES} evaluation samples, got {}",
                self.n_eval
            )));
        }
        if ![self.gamma, self.kl_low, self.kl_scratch, self.kl_precond]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Numerical(format!("non-finite entry in KL report {self:?}")));
        }
        Ok(())
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.gamma,
            sig4(self.kl_low),
            sig4(self.kl_scratch),
            sig4(self.kl_precond),
            self.n_eval,
            self.seed
        )
    }
}

pub const MIN_KL_SAMPLES: usize = 10_000;

const KL_CHUNK: usize = 4096;

/// Monte Carlo mean of the variational integrand over `n` fresh latent
/// draws from `rng`. Every flow evaluated against the same problem shares
/// the same constants, so differences between flows are meaningful.
pub fn kl_proxy<R: Rng + ?Sized>(
    sampler: &ConditionalSampler,
    problem: &ViProblem<'_>,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    if n < MIN_KL_SAMPLES {
        return Err(Error::Usage(format!("kl_proxy needs n >= {MIN_KL_SAMPLES}, got {n}")));
    }
    let d = sampler.model_dim();
    let mut total = 0.0;
    let mut left = n;
    while left > 0 {
        let m = left.min(KL_CHUNK);
        let z = standard_normal(rng, m, d);
        total += vi_integrand(sampler, problem, &z)?.iter().sum::<f64>();
        left -= m;
    }
    let kl = total / n as f64;
    if !kl.is_finite() {
        return Err(Error::Numerical(format!("kl_proxy: non-finite estimate {kl}")));
    }
    Ok(kl)
}

/// Sample mean and covariance with standard errors for every entry.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub n: usize,
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub cov_se: Vec<f64>,
}

impl MomentReport {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Largest `|a - b| / sqrt(se_a^2 + se_b^2)` over all mean and
    /// covariance entries.
    pub fn max_z_score(&self, other: &MomentReport) -> f64 {
        fn z(a: &[f64], sa: &[f64], b: &[f64], sb: &[f64]) -> f64 {
            a.iter()
                .zip(b)
                .zip(sa.iter().zip(sb))
                .map(|((x, y), (s, t))| {
                    let se = (s * s + t * t).sqrt();
                    let diff = (x - y).abs();
                    if se > 0.0 {
                        diff / se
                    } else if diff == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                })
                .fold(0.0, f64::max)
        }
        z(&self.mean, &self.mean_se, &other.mean, &other.mean_se)
            .max(z(&self.cov, &self.cov_se, &other.cov, &other.cov_se))
    }

    pub fn agrees_with(&self, other: &MomentReport, k: f64) -> bool {
        self.dim() == other.dim() && self.max_z_score(other) <= k
    }

    /// Exact moments (zero standard error), e.g. from quadrature.
    pub fn exact(mean: Vec<f64>, cov: Vec<f64>) -> Self {
        let d = mean.len();
        Self {
            n: 0,
            mean_se: vec![0.0; d],
            cov_se: vec![0.0; d * d],
            mean,
            cov,
        }
    }
}

fn mean_cov(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n - 1.0);
    (mean, cov)
}

fn sample_rows(samples: &Tensor, min: usize) -> Result<Vec<&[f64]>> {
    let (n, _) = samples
        .dims2()
        .ok_or_else(|| Error::dim("moment_report", format!("samples must be a matrix, got {:?}", samples.shape())))?;
    if n < min {
        return Err(Error::Usage(format!("moment_report needs at least {min} samples, got {n}")));
    }
    if !samples.all_finite() {
        return Err(Error::Numerical("moment_report: non-finite sample".into()));
    }
    Ok(samples.rows().collect())
}

/// Unbiased mean and covariance of independent draws. Standard errors use
/// the sample variance of `x_i` and of the centred products `x_i x_j`.
pub fn moment_report(samples: &Tensor) -> Result<MomentReport> {
    let rows = sample_rows(samples, 2)?;
    let (mean, cov) = mean_cov(&rows);
    let d = mean.len();
    let n = rows.len() as f64;
    let mean_se = (0..d).map(|i| (cov[i * d + i] / n).sqrt()).collect();
    let mut cov_se = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let c = cov[i * d + j];
            let ss: f64 = rows
                .iter()
                .map(|r| {
                    let p = (r[i] - mean[i]) * (r[j] - mean[j]) - c;
                    p * p
                })
                .sum();
            cov_se[i * d + j] = (ss / (n - 1.0) / n).sqrt();
        }
    }
    Ok(MomentReport {
        n: rows.len(),
        mean,
        cov,
        mean_se,
        cov_se,
    })
}

/// Moments of a correlated sequence (a Markov chain) with batch-means
/// standard errors over `n_batches` contiguous batches.
pub fn moment_report_batched(samples: &Tensor, n_batches: usize) -> Result<MomentReport> {
    if n_batches < 2 {
        return Err(Error::Usage("batch means need at least 2 batches".into()));
    }
    let rows = sample_rows(samples, 2 * n_batches)?;
    let (mean, cov) = mean_cov(&rows);
    let d = mean.len();
    let size = rows.len() / n_batches;
    let mut bm = vec![Vec::with_capacity(n_batches); d];
    let mut bc = vec![Vec::with_capacity(n_batches); d * d];
    for b in 0..n_batches {
        let (m, c) = mean_cov(&rows[b * size..(b + 1) * size]);
        for i in 0..d {
            bm[i].push(m[i]);
        }
        for k in 0..d * d {
            bc[k].push(c[k]);
        }
    }
    let se = |v: &[f64]| {
        let k = v.len() as f64;
        let mu = v.iter().sum::<f64>() / k;
        (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (k - 1.0) / k).sqrt()
    };
    Ok(MomentReport {
        n: rows.len(),
        mean,
        cov,
        mean_se: bm.iter().map(|v| se(v)).collect(),
        cov_se: bc.iter().map(|v| se(v)).collect(),
    })
}

/// Rectangular grid of `nx x ny` nodes including both bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn square(lo: f64, hi: f64, n: usize) -> Self {
        Self {
            x_min: lo,
            x_max: hi,
            y_min: lo,
            y_max: hi,
            nx: n,
            ny: n,
        }
    }

    /// The 401 x 401 grid over `[-4, 4]^2` used for posterior moments.
    pub fn posterior_default() -> Self {
        Self::square(-4.0, 4.0, 401)
    }

    pub fn validate(&self) -> Result<()> {
        let bounds = [self.x_min, self.x_max, self.y_min, self.y_max];
        if !bounds.iter().all(|b| b.is_finite()) || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::Usage(format!("invalid grid bounds {bounds:?}")));
        }
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::Usage("grid needs at least 2 nodes per axis".into()));
        }
        Ok(())
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + (self.x_max - self.x_min) * i as f64 / (self.nx - 1) as f64
    }

    pub fn y(&self, j: usize) -> f64 {
        self.y_min + (self.y_max - self.y_min) * j as f64 / (self.ny - 1) as f64
    }

    /// Nodes as an `[nx * ny, 2]` tensor, `x1` outer, `x2` inner.
    pub fn nodes(&self) -> Tensor {
        let mut data = Vec::with_capacity(2 * self.nx * self.ny);
        for i in 0..self.nx {
            for j in 0..self.ny {
                data.push(self.x(i));
                data.push(self.y(j));
            }
        }
        Tensor::matrix(self.nx * self.ny, 2, data).expect("validated grid")
    }

    /// Trapezoid weight of node `(i, j)`.
    fn weight(&self, i: usize, j: usize) -> f64 {
        let hx = (self.x_max - self.x_min) / (self.nx - 1) as f64;
        let hy = (self.y_max - self.y_min) / (self.ny - 1) as f64;
        let wx = if i == 0 || i == self.nx - 1 { 0.5 } else { 1.0 };
        let wy = if j == 0 || j == self.ny - 1 { 0.5 } else { 1.0 };
        hx * hy * wx * wy
    }
}

/// Log-density values at every node of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub spec: GridSpec,
    /// Indexed `i * ny + j`.
    pub logp: Vec<f64>,
}

const GRID_CHUNK: usize = 8192;

/// Evaluates a batched log-density at every grid node.
pub fn density_grid<F>(spec: GridSpec, mut logpdf: F) -> Result<DensityGrid>
where
    F: FnMut(&Tensor) -> Result<Vec<f64>>,
{
    spec.validate()?;
    let nodes = spec.nodes();
    let n = spec.nx * spec.ny;
    let mut logp = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let m = (n - start).min(GRID_CHUNK);
        let chunk = Tensor::matrix(m, 2, nodes.data()[2 * start..2 * (start + m)].to_vec())?;
        let vals = logpdf(&chunk)?;
        if vals.len() != m {
            return Err(Error::dim("density_grid", format!("expected {m} values, got {}", vals.len())));
        }
        logp.extend(vals);
        start += m;
    }
    Ok(DensityGrid { spec, logp })
}

impl DensityGrid {
    /// Trapezoid-rule integral of `exp(logp)`.
    pub fn integral(&self) -> f64 {
        self.weighted_sum(|_, _| 1.0, 0.0)
    }

    fn max_logp(&self) -> f64 {
        self.logp.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn weighted_sum(&self, f: impl Fn(f64, f64) -> f64, shift: f64) -> f64 {
        let s = &self.spec;
        let mut total = 0.0;
        for i in 0..s.nx {
            for j in 0..s.ny {
                total += s.weight(i, j) * (self.logp[i * s.ny + j] - shift).exp() * f(s.x(i), s.y(j));
            }
        }
        total
    }

    /// Mean and covariance of the normalized grid density.
    pub fn moments(&self) -> MomentReport {
        let shift = self.max_logp();
        let z = self.weighted_sum(|_, _| 1.0, shift);
        let m1 = self.weighted_sum(|a, _| a, shift) / z;
        let m2 = self.weighted_sum(|_, b| b, shift) / z;
        let c11 = self.weighted_sum(|a, _| (a - m1) * (a - m1), shift) / z;
        let c12 = self.weighted_sum(|a, b| (a - m1) * (b - m2), shift) / z;
        let c22 = self.weighted_sum(|_, b| (b - m2) * (b - m2), shift) / z;
        MomentReport::exact(vec![m1, m2], vec![c11, c12, c12, c22])
    }

    /// CSV `x1,x2,logp`.
    pub fn to_csv(&self) -> String {
        let s = &self.spec;
        let mut out = String::from("x1,x2,logp\n");
        for i in 0..s.nx {
            for j in 0..s.ny {
                let _ = writeln!(out, "{:.16e},{:.16e},{:.16e}", s.x(i), s.y(j), self.logp[i * s.ny + j]);
            }
        }
        out
    }
}

/// Posterior mean and covariance of an unnormalized 2D log-density by
/// trapezoid quadrature on `spec`.
pub fn grid_posterior_moments(spec: GridSpec, log_target: impl Fn(&[f64]) -> f64) -> Result<MomentReport> {
    let grid = density_grid(spec, |x| Ok(x.rows().map(&log_target).collect()))?;
    if !grid.logp.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("grid_posterior_moments: non-finite log-density".into()));
    }
    Ok(grid.moments())
}
