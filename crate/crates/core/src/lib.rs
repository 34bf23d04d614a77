//! Multi-fidelity preconditioned variational inference with conditional
//! normalizing flows.
//!
//! A conditional flow is pretrained by maximum likelihood on cheap
//! low-fidelity `(y, x)` pairs, then used both as a warm start and as a
//! conditional prior when fitting a posterior sampler for one observation
//! under the accurate forward model.

pub mod diff;
pub mod error;
pub mod flows;
pub mod gradcheck;
pub mod metrics;
pub mod objectives;
pub mod problem;
pub mod samplers;

pub use error::{Error, Result};
