//! Dense tensors, a recording tape for reverse-mode gradients, the parameter
//! registry with optimizer buffers, and the checkpoint container.

pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, GradCheckOptions};
pub use params::{Param, ParamId, ParamRegistry};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;
