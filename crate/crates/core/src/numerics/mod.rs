//! Dense tensors, reverse-mode gradients, and a finite-difference oracle.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_with_step, relative_error, GradCheck, DEFAULT_STEP, RELATIVE_FLOOR};
pub use tape::{pointwise, softmax_cross_entropy, Activation, Gradients, ParamId, Tape, Var, ZERO_NORM};
pub(crate) use tape::cosine_kernel;
pub use tensor::{sigmoid, Tensor};
