//! Dense tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{
    finite_difference_check, relative_error, CoordResult, Coords, GradCheckReport, REL_FLOOR,
};
pub use param::{Bound, Init, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var, PROB_FLOOR};
pub use tensor::Tensor;

