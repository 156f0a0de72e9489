//! Minimal reverse-mode automatic differentiation over flat `f64` tensors.
//!
//! A [`Tape`] records nodes in evaluation order; [`Tape::backward`] sweeps the
//! recording in reverse. The op set is closed: every op lives in this module
//! tree and carries its own hand-written backward rule.

mod basic;
mod conv;
mod fit;
mod gradcheck;
mod linalg;
pub(crate) mod spatial;
mod tape;
mod tensor;

pub use basic::sigmoid;
pub(crate) use conv::conv3d_forward;
pub use gradcheck::{grad_check, grad_check_multi, GradCheckReport};
pub(crate) use tape::Op;
pub use tape::{GradientMap, NodeId, Tape};
pub use tensor::Tensor;
