//! Dense tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod params;
mod tape;
mod tensor;


pub use gradcheck::{grad_check, grad_check_many, relative_error};
pub use params::{Init, ParamBuilder, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
