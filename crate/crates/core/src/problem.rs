//! The 2D toy inverse problem: Rosenbrock prior, normalized linear forward
//! operators, Gaussian noise and low-/high-fidelity dataset generation.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Unnormalized Rosenbrock log-density `-x1^2/2 - (x2 - x1^2)^2`.
pub fn rosenbrock_logpdf(x: &[f64]) -> f64 {
    let (x1, x2) = (x[0], x[1]);
    let r = x2 - x1 * x1;
    -0.5 * x1 * x1 - r * r
}

pub fn rosenbrock_grad(x: &[f64]) -> [f64; 2] {
    let (x1, x2) = (x[0], x[1]);
    let r = x2 - x1 * x1;
    [-x1 + 4.0 * x1 * r, -2.0 * r]
}

/// Per-row Rosenbrock log-density of a `[batch, 2]` graph value.
pub fn rosenbrock_logpdf_graph(g: &mut Graph, x: Var) -> Result<Var> {
    match g.value(x).dims2() {
        Some((_, 2)) => {}
        _ => return Err(Error::dim("rosenbrock_logpdf", format!("{:?}", g.shape(x)))),
    }
    let (x1, x2) = g.split(x, 1, 1)?;
    let x1sq = g.square(x1)?;
    let r = g.sub(x2, x1sq)?;
    let r2 = g.square(r)?;
    let a = g.scale(x1sq, -0.5)?;
    let out = g.sub(a, r2)?;
    g.sum_cols(out)
}

/// Exact draws via `x1 ~ N(0, 1)`, `x2 | x1 ~ N(x1^2, 1/2)`, as an `[n, 2]`
/// tensor.
pub fn rosenbrock_sample<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Tensor {
    let sd2 = 0.5f64.sqrt();
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let x1: f64 = StandardNormal.sample(rng);
        let e: f64 = StandardNormal.sample(rng);
        data.push(x1);
        data.push(x1 * x1 + sd2 * e);
    }
    Tensor::matrix(n, 2, data).expect("n >= 1")
}

/// Standard-normal draws as a `[n, d]` tensor.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> Tensor {
    let data = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(n, d, data).expect("n, d >= 1")
}

/// Largest eigenvalue modulus of a 2x2 matrix from its characteristic
/// polynomial; complex pairs have modulus `sqrt(det)`.
pub fn spectral_radius_2x2(a: &[[f64; 2]; 2]) -> f64 {
    let half_tr = 0.5 * (a[0][0] + a[1][1]);
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let disc = half_tr * half_tr - det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (half_tr + s).abs().max((half_tr - s).abs())
    } else {
        det.sqrt()
    }
}

/// `Γ` with independent standard-normal entries.
pub fn draw_gamma_matrix<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 2]; 2] {
    let mut m = [[0.0; 2]; 2];
    for row in &mut m {
        for v in row {
            *v = StandardNormal.sample(rng);
        }
    }
    m
}

/// `(Γ + γI) / ρ(Γ + γI)`.
pub fn normalize_operator(gamma_matrix: &[[f64; 2]; 2], gamma: f64) -> Result<[[f64; 2]; 2]> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Usage(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    let mut a = *gamma_matrix;
    a[0][0] += gamma;
    a[1][1] += gamma;
    let rho = spectral_radius_2x2(&a);
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Numerical(format!("spectral radius {rho} cannot normalize {a:?}")));
    }
    Ok(a.map(|row| row.map(|v| v / rho)))
}

/// Draws `Γ` and returns `A = (Γ + γI) / ρ(Γ + γI)`.
pub fn build_forward_matrix<R: Rng + ?Sized>(gamma: f64, rng: &mut R) -> Result<[[f64; 2]; 2]> {
    normalize_operator(&draw_gamma_matrix(rng), gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    Identity,
    Matrix,
}

/// Linear forward model `y = A x + sigma * e`, `e ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOperator {
    matrix: Tensor,
    sigma: f64,
    kind: OperatorKind,
}

impl ForwardOperator {
    pub fn identity(dim: usize, sigma: f64) -> Result<Self> {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self::build(Tensor::matrix(dim, dim, data)?, sigma, OperatorKind::Identity)
    }

    pub fn from_matrix(a: &[[f64; 2]; 2], sigma: f64) -> Result<Self> {
        let data = a.iter().flatten().copied().collect();
        Self::build(Tensor::matrix(2, 2, data)?, sigma, OperatorKind::Matrix)
    }

    fn build(matrix: Tensor, sigma: f64, kind: OperatorKind) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Usage(format!("noise level must be >= 0, got {sigma}")));
        }
        Ok(Self { matrix, sigma, kind })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn in_dim(&self) -> usize {
        self.matrix.dims2().unwrap().1
    }

    pub fn out_dim(&self) -> usize {
        self.matrix.dims2().unwrap().0
    }

    /// Noise-free `A x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix
            .rows()
            .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `A x` for each row of a `[batch, n]` graph value.
    pub fn apply_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (m, n) = self.matrix.dims2().unwrap();
        let mut at = vec![0.0; n * m];
        for i in 0..m {
            for j in 0..n {
                at[j * m + i] = self.matrix.data()[i * n + j];
            }
        }
        let at = g.constant(Tensor::matrix(n, m, at)?)?;
        g.matmul(x, at)
    }

    pub fn describe(&self) -> String {
        match self.kind {
            OperatorKind::Identity => "identity".to_string(),
            OperatorKind::Matrix => {
                let vals: Vec<String> = self.matrix.data().iter().map(|v| format!("{v:.6}")).collect();
                format!("matrix[{}]", vals.join(";"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub gamma: Option<f64>,
    pub sigma: f64,
    pub seed: u64,
    pub operator: String,
}

/// Joint `(y, x)` training pairs, stored as `[n, dy]` and `[n, dx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Tensor,
    pub x: Tensor,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.dims2().map_or(0, |(n, _)| n)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// CSV with one provenance comment line and columns `y1..,x1..`.
    pub fn to_csv(&self) -> String {
        let p = &self.provenance;
        let gamma = p.gamma.map_or("none".to_string(), |g| g.to_string());
        let mut out = format!(
            "# dataset gamma={gamma} sigma={} seed={} operator={}\n",
            p.sigma, p.seed, p.operator
        );
        let (_, dy) = self.y.dims2().unwrap();
        let (_, dx) = self.x.dims2().unwrap();
        let cols: Vec<String> = (1..=dy)
            .map(|i| format!("y{i}"))
            .chain((1..=dx).map(|i| format!("x{i}")))
            .collect();
        out.push_str(&cols.join(","));
        out.push('\n');
        for (yr, xr) in self.y.rows().zip(self.x.rows()) {
            let vals: Vec<String> = yr.iter().chain(xr).map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(out, "{}", vals.join(","));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `x` from `prior_sampler`, `y = A x + sigma * e`. All randomness comes
/// from `seed`.
pub fn generate_pairs<F>(
    mut prior_sampler: F,
    operator: &ForwardOperator,
    n: usize,
    seed: u64,
    gamma: Option<f64>,
) -> Result<Dataset>
where
    F: FnMut(&mut ChaCha8Rng, usize) -> Tensor,
{
    if n == 0 {
        return Err(Error::Usage("dataset size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = prior_sampler(&mut rng, n);
    let (rows, dx) = x.dims2().ok_or_else(|| Error::dim("generate_pairs", "prior draws must be a matrix"))?;
    if rows != n || dx != operator.in_dim() {
        return Err(Error::dim(
            "generate_pairs",
            format!("prior returned [{rows}, {dx}], expected [{n}, {}]", operator.in_dim()),
        ));
    }
    let dy = operator.out_dim();
    let mut y = Vec::with_capacity(n * dy);
    for xr in x.rows() {
        for v in operator.apply(xr) {
            let e: f64 = StandardNormal.sample(&mut rng);
            y.push(v + operator.sigma() * e);
        }
    }
    Ok(Dataset {
        y: Tensor::matrix(n, dy, y)?,
        x,
        provenance: Provenance {
            gamma,
            sigma: operator.sigma(),
            seed,
            operator: operator.describe(),
        },
    })
}

/// A single noisy observation `A x_true + sigma * e`.
pub fn observed_data<R: Rng + ?Sized>(x_true: &[f64], operator: &ForwardOperator, rng: &mut R) -> Vec<f64> {
    operator
        .apply(x_true)
        .into_iter()
        .map(|v| {
            let e: f64 = StandardNormal.sample(rng);
            v + operator.sigma() * e
        })
        .collect()
}

/// Unnormalized high-fidelity posterior
/// `-||A x - y||^2 / (2 sigma^2) + rosenbrock_logpdf(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPosterior {
    pub a: [[f64; 2]; 2],
    pub y: [f64; 2],
    pub sigma: f64,
}

impl ToyPosterior {
    fn residual(&self, x: &[f64]) -> [f64; 2] {
        let a = &self.a;
        [
            a[0][0] * x[0] + a[0][1] * x[1] - self.y[0],
            a[1][0] * x[0] + a[1][1] * x[1] - self.y[1],
        ]
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let r = self.residual(x);
        -(r[0] * r[0] + r[1] * r[1]) / (2.0 * self.sigma * self.sigma) + rosenbrock_logpdf(x)
    }

    pub fn grad(&self, x: &[f64]) -> [f64; 2] {
        let r = self.residual(x);
        let s2 = self.sigma * self.sigma;
        let a = &self.a;
        let p = rosenbrock_grad(x);
        [
            p[0] - (a[0][0] * r[0] + a[1][0] * r[1]) / s2,
            p[1] - (a[0][1] * r[0] + a[1][1] * r[1]) / s2,
        ]
    }
}
