//! Invertible building blocks: affine couplings, recursive coupling blocks,
//! flow stacks and the block-triangular conditional flow.

mod block;
mod checkpoint;
mod conditional;
mod conditioner;
mod coupling;
mod params;
mod stack;

pub use block::RecursiveBlock;
pub use checkpoint::{format_shape, CHECKPOINT_HEADER};
pub use conditional::{
    standard_normal_logpdf, ConditionalArch, ConditionalFlow, ConditionalSampler, FrozenPrior,
};
pub use coupling::AffineCoupling;
pub use params::{ParamId, ParamStore};
pub use stack::{FlowArch, FlowStack};
