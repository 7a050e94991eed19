//! Dense tensors, a reverse-mode tape over them, and gradient checking.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    central_difference, grad_check, grad_check_inputs, relative_error, GradCheck,
    REL_ERROR_FLOOR,
};
pub use tape::{
    bce_term, sigmoid, AttentionLayout, AttentionMask, Gradients, Segment, Tape, Var, BCE_CLAMP,
};
pub use tensor::Tensor;
