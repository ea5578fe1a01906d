//! Minimal dense-tensor engine with reverse-mode gradients.
//!
//! The op set is closed: everything the rest of the crate computes (attention,
//! layer norm, adapters, Kronecker-factored weights, cross entropy) is built
//! from the ops on [`GradTape`]. Tensors are immutable; ops are pure; a tape
//! belongs to one training step on one thread.

pub mod fdcheck;
pub mod kernels;
mod param;
mod tape;
mod tensor;

pub use param::{ParamGroup, Parameter};
pub use tape::{GradTape, Gradients, ValueId};
pub use tensor::{DType, Data, Element, Tensor};
