pub mod capsnet;
pub mod error;
pub mod eval;
pub mod model;
pub mod ndcore;
pub mod nn;
pub mod objective;
pub mod predictor;
pub mod rotations;
pub mod scalar;
pub mod seeding;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision aliases used throughout training and evaluation.
pub type Tensor = ndcore::Tensor<f32>;
pub type Graph = ndcore::Graph<f32>;
pub type ParamSet = ndcore::ParamSet<f32>;
pub type AdamState = ndcore::AdamState<f32>;
