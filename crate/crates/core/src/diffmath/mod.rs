//! Dense tensors with reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    all_coordinates, finite_diff_check, sample_coordinates, GradCheckReport, RELATIVE_FLOOR,
};
pub use tape::{sigmoid, Activation, Gradients, Tape, Var, DEFAULT_LEAKY_SLOPE};
pub use tensor::Tensor;
