use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;

use super::stack::{FlowArch, FlowStack};
use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Architecture shared by both lanes of a [`ConditionalFlow`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalArch {
    pub data_dim: usize,
    pub model_dim: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub clamp: f64,
}

impl Default for ConditionalArch {
    fn default() -> Self {
        Self {
            data_dim: 2,
            model_dim: 2,
            blocks: 8,
            hidden: 64,
            clamp: 5.0,
        }
    }
}

impl ConditionalArch {
    pub fn data_lane(&self) -> FlowArch {
        FlowArch {
            dim: self.data_dim,
            cond_dim: 0,
            blocks: self.blocks,
            hidden: self.hidden,
            clamp: self.clamp,
        }
    }

    pub fn model_lane(&self) -> FlowArch {
        FlowArch {
            dim: self.model_dim,
            cond_dim: self.data_dim,
            blocks: self.blocks,
            hidden: self.hidden,
            clamp: self.clamp,
        }
    }
}

/// `log N(z; 0, I)` for each row of a `[batch, d]` graph value.
pub fn standard_normal_logpdf(g: &mut Graph, z: Var) -> Result<Var> {
    let d = g
        .value(z)
        .dims2()
        .ok_or_else(|| Error::dim("standard_normal_logpdf", format!("{:?}", g.shape(z))))?
        .1;
    let sq = g.row_sq_norm(z)?;
    let half = g.scale(sq, -0.5)?;
    g.add_scalar(half, -0.5 * d as f64 * (2.0 * PI).ln())
}

/// Block-triangular joint map `(y, x) -> (z_y, z_x)` with
/// `z_y = G_y(y)` and `z_x = G_x(x; z_y)`.
///
/// The model lane's couplings are conditioned on the data-lane output `z_y`.
/// Inverting the model lane at a fixed `z_y` samples the learned
/// conditional `p(x | y)`.
#[derive(Debug, Clone)]
pub struct ConditionalFlow {
    arch: ConditionalArch,
    data_lane: FlowStack,
    model_lane: FlowStack,
}

fn rows_of(op: &'static str, t: &Tensor, width: usize) -> Result<usize> {
    match t.dims2() {
        Some((b, w)) if w == width => Ok(b),
        _ => Err(Error::dim(op, format!("expected [batch, {width}], got {:?}", t.shape()))),
    }
}

impl ConditionalFlow {
    pub fn new<R: Rng + ?Sized>(arch: ConditionalArch, rng: &mut R) -> Result<Self> {
        let data_lane = FlowStack::new(arch.data_lane(), rng)?;
        let model_lane = FlowStack::new(arch.model_lane(), rng)?;
        Ok(Self {
            arch,
            data_lane,
            model_lane,
        })
    }

    pub(crate) fn from_lanes(arch: ConditionalArch, data_lane: FlowStack, model_lane: FlowStack) -> Self {
        Self {
            arch,
            data_lane,
            model_lane,
        }
    }

    pub fn arch(&self) -> &ConditionalArch {
        &self.arch
    }

    pub fn data_lane(&self) -> &FlowStack {
        &self.data_lane
    }

    pub fn model_lane(&self) -> &FlowStack {
        &self.model_lane
    }

    pub fn data_lane_mut(&mut self) -> &mut FlowStack {
        &mut self.data_lane
    }

    pub fn model_lane_mut(&mut self) -> &mut FlowStack {
        &mut self.model_lane
    }

    /// Differentiable joint forward. Returns `(z_y, z_x, logdet)` where the
    /// log-det of the block-triangular Jacobian is the sum of the two lanes'.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        data_vars: &[Var],
        model_vars: &[Var],
        y: Var,
        x: Var,
    ) -> Result<(Var, Var, Var)> {
        let (zy, ld_y) = self.data_lane.forward_graph(g, data_vars, y, None)?;
        let (zx, ld_x) = self.model_lane.forward_graph(g, model_vars, x, Some(zy))?;
        let logdet = g.add(ld_y, ld_x)?;
        Ok((zy, zx, logdet))
    }

    /// Non-differentiable joint forward over `[batch, dy]` and `[batch, dx]`.
    pub fn forward(&self, y: &Tensor, x: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
        let b = rows_of("conditional_forward", y, self.arch.data_dim)?;
        if rows_of("conditional_forward", x, self.arch.model_dim)? != b {
            return Err(Error::dim("conditional_forward", "y and x batch sizes differ"));
        }
        let mut g = Graph::new();
        let dv = self.data_lane.bind(&mut g, false)?;
        let mv = self.model_lane.bind(&mut g, false)?;
        let y = g.constant(y.clone())?;
        let x = g.constant(x.clone())?;
        let (zy, zx, ld) = self.forward_graph(&mut g, &dv, &mv, y, x)?;
        Ok((g.value(zy).clone(), g.value(zx).clone(), g.value(ld).data().to_vec()))
    }

    /// `z_y = G_y(y)` for a single observation.
    pub fn condition(&self, y: &[f64]) -> Result<Vec<f64>> {
        condition_on(&self.data_lane, y)
    }

    /// `x = G_x^{-1}(z; G_y(y))` for each row of `z`.
    pub fn posterior_sample(&self, y: &[f64], z: &Tensor) -> Result<Tensor> {
        let c = self.condition(y)?;
        invert_model_lane(&self.model_lane, &c, z).map(|(x, _)| x)
    }

    /// Splits a pretrained flow into a trainable posterior sampler (a deep
    /// copy of the model lane) and a frozen snapshot used as conditional
    /// prior. The two share nothing mutable.
    pub fn init_from_pretrained(&self) -> (ConditionalSampler, FrozenPrior) {
        let snapshot = Arc::new(self.clone());
        let sampler = ConditionalSampler {
            data_lane: Arc::new(self.data_lane.clone()),
            model_lane: self.model_lane.clone(),
        };
        (sampler, FrozenPrior { flow: snapshot })
    }
}

fn condition_on(data_lane: &FlowStack, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != data_lane.dim() {
        return Err(Error::dim(
            "condition",
            format!("observation has {} entries, data lane expects {}", y.len(), data_lane.dim()),
        ));
    }
    let yt = Tensor::matrix(1, y.len(), y.to_vec())?;
    Ok(data_lane.forward(&yt, None)?.0.into_data())
}

fn invert_model_lane(model_lane: &FlowStack, c: &[f64], z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let b = rows_of("posterior_sample", z, model_lane.dim())?;
    let ct = Tensor::repeat_row(c, b);
    model_lane.inverse(z, Some(&ct))
}

/// Posterior sampler `T(z) = G_x^{-1}(z; G_y(y))` with a trainable model
/// lane and a fixed data lane.
#[derive(Debug, Clone)]
pub struct ConditionalSampler {
    data_lane: Arc<FlowStack>,
    model_lane: FlowStack,
}

impl ConditionalSampler {
    /// Sampler built from an untrained flow: identity model lane, identity
    /// data lane (so the conditioning value is the observation itself).
    pub fn fresh<R: Rng + ?Sized>(arch: ConditionalArch, rng: &mut R) -> Result<Self> {
        Ok(ConditionalFlow::new(arch, rng)?.init_from_pretrained().0)
    }

    pub fn model_dim(&self) -> usize {
        self.model_lane.dim()
    }

    pub fn model_lane(&self) -> &FlowStack {
        &self.model_lane
    }

    pub fn model_lane_mut(&mut self) -> &mut FlowStack {
        &mut self.model_lane
    }

    pub fn condition(&self, y: &[f64]) -> Result<Vec<f64>> {
        condition_on(&self.data_lane, y)
    }

    pub fn sample(&self, y: &[f64], z: &Tensor) -> Result<Tensor> {
        let c = self.condition(y)?;
        invert_model_lane(&self.model_lane, &c, z).map(|(x, _)| x)
    }

    /// Samples together with `log|det dT/dz|` per row.
    pub fn sample_with_logdet(&self, y: &[f64], z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let c = self.condition(y)?;
        invert_model_lane(&self.model_lane, &c, z)
    }

    /// Log-density of the pushforward of `N(0, I)` through `T`, at each row
    /// of `x`.
    pub fn log_density(&self, y: &[f64], x: &Tensor) -> Result<Vec<f64>> {
        let c = self.condition(y)?;
        lane_log_density(&self.model_lane, &c, x)
    }

    /// Reassembles a full conditional flow for checkpointing.
    pub fn to_flow(&self, arch: ConditionalArch) -> ConditionalFlow {
        ConditionalFlow::from_lanes(arch, (*self.data_lane).clone(), self.model_lane.clone())
    }
}

fn lane_log_density(model_lane: &FlowStack, c: &[f64], x: &Tensor) -> Result<Vec<f64>> {
    let b = rows_of("log_density", x, model_lane.dim())?;
    let mut g = Graph::new();
    let vars = model_lane.bind(&mut g, false)?;
    let xv = g.constant(x.clone())?;
    let cv = g.constant(Tensor::repeat_row(c, b))?;
    let (z, ld) = model_lane.forward_graph(&mut g, &vars, xv, Some(cv))?;
    let lp = standard_normal_logpdf(&mut g, z)?;
    let out = g.add(lp, ld)?;
    Ok(g.value(out).data().to_vec())
}

/// Read-only snapshot of a pretrained conditional flow, evaluated as the
/// conditional prior `log N(G_x(x; z_y); 0, I) + log|det d G_x / dx|`.
#[derive(Debug, Clone)]
pub struct FrozenPrior {
    flow: Arc<ConditionalFlow>,
}

impl FrozenPrior {
    pub fn flow(&self) -> &ConditionalFlow {
        &self.flow
    }

    pub fn condition(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.flow.condition(y)
    }

    /// Conditional prior log-density at each row of `x`.
    pub fn log_prob(&self, y: &[f64], x: &Tensor) -> Result<Vec<f64>> {
        let c = self.condition(y)?;
        lane_log_density(&self.flow.model_lane, &c, x)
    }

    /// Registers the frozen model-lane weights as graph constants.
    pub fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.flow.model_lane.bind(g, false)
    }

    /// Differentiable in `x` only: `vars` must come from [`FrozenPrior::bind`]
    /// and `cond` holds `z_y` repeated per row.
    pub fn log_prob_graph(&self, g: &mut Graph, vars: &[Var], cond: Var, x: Var) -> Result<Var> {
        let (z, ld) = self.flow.model_lane.forward_graph(g, vars, x, Some(cond))?;
        let lp = standard_normal_logpdf(g, z)?;
        g.add(lp, ld)
    }
}
