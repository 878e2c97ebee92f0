//! Dense tensors, a gradient tape, and the optimizer used to train the denoiser.

mod graph;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod tensor;

pub use gradcheck::{check_gradients, op_suite, GradCheckReport, OpCase};
pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::neg_sq_dist_values;
pub use optim::{clip_global_norm, Adam, LrSchedule};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
mod tests;
