//! Minimal differentiable-programming toolkit: a tape-style [`Graph`],
//! parameter storage, layers and the Adam optimizer.

mod graph;
pub mod gradcheck;
pub mod layers;
mod optim;
mod params;

pub use graph::{Conv2dSpec, Graph, Var};
pub use optim::Adam;
pub use params::{uniform_fan_in, ParamGrads, ParamId, ParamStore};

#[cfg(test)]
mod tests;
