use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{ParamId, ParamStore};
use crate::diff::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub(crate) weight: ParamId,
    pub(crate) bias: ParamId,
}

impl Linear {
    /// Weights drawn from N(0, gain^2 / fan_in); `gain = 0` gives an all-zero
    /// layer.
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = if gain == 0.0 {
            vec![0.0; fan_in * fan_out]
        } else {
            let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("finite std");
            (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect()
        };
        let weight = store.add(
            format!("{name}.w"),
            Tensor::matrix(fan_in, fan_out, w).expect("nonzero widths"),
        );
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let h = g.matmul(x, vars[self.weight.0])?;
        g.add_row(h, vars[self.bias.0])
    }
}

/// Residual feed-forward network producing per-coordinate log-scales and
/// shifts for an affine coupling:
///
/// ```text
/// h0  = lrelu(W_in x + b_in)
/// h1  = h0 + lrelu(W_mid h0 + b_mid)
/// out = W_out h1 + b_out          (W_out, b_out start at zero)
/// ```
#[derive(Debug, Clone)]
pub(crate) struct Conditioner {
    input: Linear,
    hidden: Linear,
    pub(crate) output: Linear,
    slope: f64,
}

pub(crate) const LEAKY_SLOPE: f64 = 0.01;

impl Conditioner {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_width: usize,
        hidden: usize,
        out_width: usize,
        rng: &mut R,
    ) -> Self {
        let gain = 2f64.sqrt();
        Self {
            input: Linear::new(store, &format!("{name}.in"), in_width, hidden, gain, rng),
            hidden: Linear::new(store, &format!("{name}.mid"), hidden, hidden, gain, rng),
            output: Linear::new(store, &format!("{name}.out"), hidden, out_width, 0.0, rng),
            slope: LEAKY_SLOPE,
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let h = self.input.forward(g, vars, x)?;
        let h0 = g.leaky_relu(h, self.slope)?;
        let r = self.hidden.forward(g, vars, h0)?;
        let r = g.leaky_relu(r, self.slope)?;
        let h1 = g.add(h0, r)?;
        self.output.forward(g, vars, h1)
    }
}
