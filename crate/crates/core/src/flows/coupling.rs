use rand::Rng;

use super::conditioner::Conditioner;
use super::params::ParamStore;
use crate::diff::{Graph, Var};
use crate::error::{Error, Result};

/// Affine coupling across a column split `[first | second]`:
///
/// ```text
/// v1 = u1
/// v2 = u2 * exp(s(u1, c)) + t(u1, c)
/// log|det| = sum(s)
/// ```
///
/// The raw log-scale is soft-clamped to `clamp * tanh(s / clamp)`.
#[derive(Debug, Clone)]
pub struct AffineCoupling {
    pub(crate) first: usize,
    pub(crate) second: usize,
    pub(crate) cond_width: usize,
    pub(crate) conditioner: Conditioner,
    pub(crate) clamp: f64,
}

impl AffineCoupling {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        first: usize,
        second: usize,
        cond_width: usize,
        hidden: usize,
        clamp: f64,
        rng: &mut R,
    ) -> Self {
        let conditioner = Conditioner::new(store, name, first + cond_width, hidden, 2 * second, rng);
        Self {
            first,
            second,
            cond_width,
            conditioner,
            clamp,
        }
    }

    pub fn width(&self) -> usize {
        self.first + self.second
    }

    fn check(&self, g: &Graph, op: &'static str, u: Var, c: Option<Var>) -> Result<usize> {
        let batch = match g.value(u).dims2() {
            Some((b, w)) if w == self.width() => b,
            _ => {
                return Err(Error::dim(
                    op,
                    format!("expected [batch, {}], got {:?}", self.width(), g.shape(u)),
                ))
            }
        };
        match (c, self.cond_width) {
            (None, 0) => Ok(batch),
            (Some(c), w) if w > 0 && g.shape(c) == [batch, w] => Ok(batch),
            (c, w) => Err(Error::dim(
                op,
                format!(
                    "condition {:?} for a layer expecting width {w}",
                    c.map(|c| g.shape(c).to_vec())
                ),
            )),
        }
    }

    /// Clamped log-scale and shift, each `[batch, second]`.
    fn scale_shift(&self, g: &mut Graph, vars: &[Var], fixed: Var, c: Option<Var>) -> Result<(Var, Var)> {
        let inp = match c {
            Some(c) => g.concat(fixed, c, 1)?,
            None => fixed,
        };
        let h = self.conditioner.forward(g, vars, inp)?;
        let (s_raw, t) = g.split(h, 1, self.second)?;
        let s = g.scale(s_raw, 1.0 / self.clamp)?;
        let s = g.tanh(s)?;
        let s = g.scale(s, self.clamp)?;
        Ok((s, t))
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], u: Var, c: Option<Var>) -> Result<(Var, Var)> {
        self.check(g, "coupling_forward", u, c)?;
        let (u1, u2) = g.split(u, 1, self.first)?;
        let (s, t) = self.scale_shift(g, vars, u1, c)?;
        let es = g.exp(s)?;
        let v2 = g.mul(u2, es)?;
        let v2 = g.add(v2, t)?;
        let v = g.concat(u1, v2, 1)?;
        let logdet = g.sum_cols(s)?;
        Ok((v, logdet))
    }

    pub fn inverse(&self, g: &mut Graph, vars: &[Var], v: Var, c: Option<Var>) -> Result<(Var, Var)> {
        self.check(g, "coupling_inverse", v, c)?;
        let (v1, v2) = g.split(v, 1, self.first)?;
        let (s, t) = self.scale_shift(g, vars, v1, c)?;
        let neg_s = g.neg(s)?;
        let inv_scale = g.exp(neg_s)?;
        let d = g.sub(v2, t)?;
        let u2 = g.mul(d, inv_scale)?;
        let u = g.concat(v1, u2, 1)?;
        let logdet = g.sum_cols(neg_s)?;
        Ok((u, logdet))
    }
}
