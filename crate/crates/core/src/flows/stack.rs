use rand::Rng;

use super::block::RecursiveBlock;
use super::params::ParamStore;
use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Shape of a [`FlowStack`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowArch {
    /// Width of the transformed vector.
    pub dim: usize,
    /// Width of the conditioning vector fed to every coupling (0 for none).
    pub cond_dim: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub clamp: f64,
}

impl FlowArch {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Usage(format!("flow dimension must be >= 2, got {}", self.dim)));
        }
        if self.blocks == 0 || self.hidden == 0 {
            return Err(Error::Usage("flow needs at least one block and hidden unit".into()));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(Error::Usage(format!("scale clamp must be positive, got {}", self.clamp)));
        }
        Ok(())
    }
}

/// Composition of recursive coupling blocks. Each block is entered through a
/// fixed coordinate reversal so consecutive blocks transform different
/// coordinates; with an odd block count one more reversal at the exit restores
/// the input order, so a fresh stack is the identity.
#[derive(Debug, Clone)]
pub struct FlowStack {
    arch: FlowArch,
    blocks: Vec<RecursiveBlock>,
    params: ParamStore,
    perm: Vec<usize>,
    perm_inv: Vec<usize>,
}

impl FlowStack {
    /// Builds a stack whose conditioners have random hidden layers and zero
    /// output layers, so the fresh flow is exactly the identity.
    pub fn new<R: Rng + ?Sized>(arch: FlowArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        let blocks = (0..arch.blocks)
            .map(|k| {
                RecursiveBlock::new(
                    &mut params,
                    &format!("b{k}"),
                    arch.dim,
                    arch.cond_dim,
                    arch.hidden,
                    arch.clamp,
                    rng,
                )
            })
            .collect();
        let perm: Vec<usize> = (0..arch.dim).rev().collect();
        let mut perm_inv = vec![0; arch.dim];
        for (j, &p) in perm.iter().enumerate() {
            perm_inv[p] = j;
        }
        Ok(Self {
            arch,
            blocks,
            params,
            perm,
            perm_inv,
        })
    }

    pub fn arch(&self) -> &FlowArch {
        &self.arch
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.arch.cond_dim
    }

    pub fn blocks(&self) -> &[RecursiveBlock] {
        &self.blocks
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        self.params.bind(g, trainable)
    }

    fn check_input(&self, g: &Graph, op: &'static str, u: Var) -> Result<()> {
        match g.value(u).dims2() {
            Some((_, w)) if w == self.arch.dim => Ok(()),
            _ => Err(Error::dim(
                op,
                format!("expected [batch, {}], got {:?}", self.arch.dim, g.shape(u)),
            )),
        }
    }

    /// Latent-ward map: returns `(z, log|det dz/du|)` with the log-det per row.
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], u: Var, c: Option<Var>) -> Result<(Var, Var)> {
        self.check_input(g, "stack_forward", u)?;
        let mut x = u;
        let mut logdet: Option<Var> = None;
        for block in &self.blocks {
            let p = g.permute_cols(x, &self.perm)?;
            let (out, ld) = block.forward(g, vars, p, c)?;
            x = out;
            logdet = Some(match logdet {
                Some(acc) => g.add(acc, ld)?,
                None => ld,
            });
        }
        if self.blocks.len() % 2 == 1 {
            x = g.permute_cols(x, &self.perm_inv)?;
        }
        Ok((x, logdet.expect("at least one block")))
    }

    /// Exact inverse of [`FlowStack::forward_graph`]; the log-det is that of
    /// the inverse map.
    pub fn inverse_graph(&self, g: &mut Graph, vars: &[Var], z: Var, c: Option<Var>) -> Result<(Var, Var)> {
        self.check_input(g, "stack_inverse", z)?;
        let mut x = z;
        if self.blocks.len() % 2 == 1 {
            x = g.permute_cols(x, &self.perm)?;
        }
        let mut logdet: Option<Var> = None;
        for block in self.blocks.iter().rev() {
            let (out, ld) = block.inverse(g, vars, x, c)?;
            x = g.permute_cols(out, &self.perm_inv)?;
            logdet = Some(match logdet {
                Some(acc) => g.add(acc, ld)?,
                None => ld,
            });
        }
        Ok((x, logdet.expect("at least one block")))
    }

    fn eval(&self, u: &Tensor, c: Option<&Tensor>, inverse: bool) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let u = g.constant(u.clone())?;
        let c = c.map(|c| g.constant(c.clone())).transpose()?;
        let (out, ld) = if inverse {
            self.inverse_graph(&mut g, &vars, u, c)?
        } else {
            self.forward_graph(&mut g, &vars, u, c)?
        };
        Ok((g.value(out).clone(), g.value(ld).data().to_vec()))
    }

    /// Non-differentiable forward over a `[batch, dim]` input.
    pub fn forward(&self, u: &Tensor, c: Option<&Tensor>) -> Result<(Tensor, Vec<f64>)> {
        self.eval(u, c, false)
    }

    pub fn inverse(&self, z: &Tensor, c: Option<&Tensor>) -> Result<(Tensor, Vec<f64>)> {
        self.eval(z, c, true)
    }

    /// Overwrites all parameters with `N(0, std^2)` draws, including the
    /// zero-initialized output layers. Used to exercise non-trivial flows.
    pub fn randomize<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
        for t in self.params.tensors_mut() {
            for x in t.data_mut() {
                *x = rand_distr::Distribution::sample(&normal, rng);
            }
        }
    }
}
