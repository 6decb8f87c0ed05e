//! Reverse-mode automatic differentiation on dense f64 tensors.
//!
//! A `Tape` records operations as they execute; `Tape::backward` replays
//! the recorded closures in reverse to accumulate gradients. Test mode
//! runs everything in 64-bit, which is also what checkpoint payloads are
//! rounded from (stored as f32).

pub mod check;
mod conv;
mod ops;
mod params;
mod tape;
mod tensor;


pub use conv::{Conv3dSpec, ConvTranspose3dSpec};
pub use ops::LinearOp;
pub use params::{BoundParams, ParameterSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
