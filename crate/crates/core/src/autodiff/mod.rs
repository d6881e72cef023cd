//! Reverse-mode gradients over a recorded forward pass, and a
//! central-difference checker.

mod bundle;
mod gradcheck;
mod tape;

pub use bundle::GradBundle;
pub use gradcheck::{
    finite_difference_check, relative_error, CheckReport, Verdict, DEFAULT_STEP, PASS_TOLERANCE, WARN_TOLERANCE,
};
pub use tape::{BatchStats, GradientTape, Gradients, Value, Var};

pub(crate) use tape::softmax_rows;
