use rand::Rng;

use super::coupling::AffineCoupling;
use super::params::ParamStore;
use crate::diff::{Graph, Var};
use crate::error::Result;

/// Hierarchical coupling block: couple the two halves of the input, then
/// recurse into each half while it still has at least two coordinates.
/// Halves are `ceil(w/2)` and `floor(w/2)`.
#[derive(Debug, Clone)]
pub struct RecursiveBlock {
    pub(crate) coupling: AffineCoupling,
    left: Option<Box<RecursiveBlock>>,
    right: Option<Box<RecursiveBlock>>,
}

impl RecursiveBlock {
    /// `width` must be at least 2.
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        cond_width: usize,
        hidden: usize,
        clamp: f64,
        rng: &mut R,
    ) -> Self {
        debug_assert!(width >= 2);
        let first = width.div_ceil(2);
        let second = width / 2;
        let coupling = AffineCoupling::new(
            store,
            &format!("{name}.c"),
            first,
            second,
            cond_width,
            hidden,
            clamp,
            rng,
        );
        let mut child = |w: usize, tag: &str, rng: &mut R| {
            (w >= 2).then(|| {
                Box::new(RecursiveBlock::new(
                    store,
                    &format!("{name}.{tag}"),
                    w,
                    cond_width,
                    hidden,
                    clamp,
                    rng,
                ))
            })
        };
        let left = child(first, "l", rng);
        let right = child(second, "r", rng);
        Self {
            coupling,
            left,
            right,
        }
    }

    pub fn width(&self) -> usize {
        self.coupling.width()
    }

    /// Number of affine couplings in this block, including nested ones.
    pub fn coupling_count(&self) -> usize {
        1 + self.left.as_ref().map_or(0, |b| b.coupling_count())
            + self.right.as_ref().map_or(0, |b| b.coupling_count())
    }

    pub(crate) fn forward(&self, g: &mut Graph, vars: &[Var], u: Var, c: Option<Var>) -> Result<(Var, Var)> {
        let (v, mut logdet) = self.coupling.forward(g, vars, u, c)?;
        if self.left.is_none() && self.right.is_none() {
            return Ok((v, logdet));
        }
        let (mut a, mut b) = g.split(v, 1, self.coupling.first)?;
        if let Some(left) = &self.left {
            let (out, ld) = left.forward(g, vars, a, c)?;
            a = out;
            logdet = g.add(logdet, ld)?;
        }
        if let Some(right) = &self.right {
            let (out, ld) = right.forward(g, vars, b, c)?;
            b = out;
            logdet = g.add(logdet, ld)?;
        }
        Ok((g.concat(a, b, 1)?, logdet))
    }

    pub(crate) fn inverse(&self, g: &mut Graph, vars: &[Var], v: Var, c: Option<Var>) -> Result<(Var, Var)> {
        let mut logdet = None;
        let mut v = v;
        if self.left.is_some() || self.right.is_some() {
            let (mut a, mut b) = g.split(v, 1, self.coupling.first)?;
            if let Some(left) = &self.left {
                let (out, ld) = left.inverse(g, vars, a, c)?;
                a = out;
                logdet = Some(ld);
            }
            if let Some(right) = &self.right {
                let (out, ld) = right.inverse(g, vars, b, c)?;
                b = out;
                logdet = Some(match logdet {
                    Some(acc) => g.add(acc, ld)?,
                    None => ld,
                });
            }
            v = g.concat(a, b, 1)?;
        }
        let (u, ld) = self.coupling.inverse(g, vars, v, c)?;
        let logdet = match logdet {
            Some(acc) => g.add(acc, ld)?,
            None => ld,
        };
        Ok((u, logdet))
    }
}
