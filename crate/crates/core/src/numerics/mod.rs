//! Tensors, differentiable primitives, the gradient tape, finite-difference
//! verification and the optimizer.

pub mod adam;
pub(crate) mod conv;
pub(crate) mod dft;
pub(crate) mod gemm;
pub mod gradcheck;
pub(crate) mod lstm;
pub mod ops;
pub mod par;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState, LrPolicy};
pub use dft::{frame_count, hann};
pub use gradcheck::{grad_check, grad_check_all, GradCase, KindReport};
pub use ops::{chunk_count, primitive_backward, primitive_forward, OpKind};
pub use params::{init_uniform, ParamSet};
pub use tape::{Bound, Gradients, Tape, Var};
pub use tensor::Tensor;
