pub mod audio;
pub mod container;
pub mod converter;
pub mod error;
pub mod evaluator;
pub mod f0;
pub mod features;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::{Rng, RngState};
pub use tensor::{Gradients, Graph, Real, Tensor, Var};
