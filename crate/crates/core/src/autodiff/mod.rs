//! Minimal reverse-mode automatic differentiation for the networks in this
//! crate: dense tensors, a recording tape, layers and Adam.

mod conv;
pub mod nn;
pub mod tape;
pub mod tensor;

pub use nn::{Adam, Bound, Conv, Dense, Init, ParamId, ParamSet};
pub use tape::{softplus_inverse, BatchStats, Grads, Tape, Var, BN_EPS};
pub use tensor::Tensor;
