//! Minimal reverse-mode differentiation over the `nnops` operation set.

mod gradcheck;
pub mod suite;
mod tape;

pub use gradcheck::{
    grad_check, grad_check_refined, relative_error, Difference, GradCheckReport, InputReport, DEFAULT_STEP,
    FULL_SWEEP_LIMIT, REFINED, SAMPLED_COORDS,
};
pub use tape::{Gradients, NodeId, Tape};
