//! Reverse-mode automatic differentiation over a flat parameter store.

pub mod adam;
pub mod gradcheck;
pub mod mlp;
pub mod params;
pub mod tape;

#[cfg(test)]
mod tests;

pub use adam::{clip_global_norm, Adam};
pub use mlp::Mlp;
pub use params::{Block, BlockId, ParamStore};
pub use tape::{Adjoints, Tape, Var};
