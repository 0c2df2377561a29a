//! Dense tensors, tape-based reverse-mode differentiation and Adam optimizers.

mod nn;
mod optim;
mod params;
mod real;
mod rng;
mod tape;
mod tensor;

pub use nn::{LayerNorm, Linear};
pub use optim::{OptimizerKind, OptimizerState};
pub use params::{Bound, ParamId, ParamStore};
pub use real::Real;
pub use rng::{Seeds, StreamRng};
pub use tape::{softplus, Gradients, Tape, Var};
pub use tensor::Tensor;
