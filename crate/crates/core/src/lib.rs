#![no_std]
extern crate alloc;

pub mod decoder;
pub mod energy;
pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod mcmc;
pub mod model;
pub mod mlp;
pub mod ode;
pub mod params;
pub mod random;
pub mod reweight;
pub mod score;
pub mod sde;
pub mod tensor;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
