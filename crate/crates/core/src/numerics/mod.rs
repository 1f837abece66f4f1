//! Tensors, reverse-mode differentiation, and optimization.

pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{lr_schedule, AdamWState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ParamSet, Scalar, Tensor};
