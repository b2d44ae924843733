//! Dense `f64` tensors, a reverse-mode tape, optimizers and a
//! finite-difference gradient oracle.

mod gemm;
mod gradcheck;
mod interp;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use interp::bilinear_upsample;
pub use optim::{lr_schedule, AdamW, AdamWConfig, SgdMomentum};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use tape::{softplus_scalar, Gradients, Tape, Var};
pub(crate) use tape::{sigmoid, softmax_rows_in_place};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
