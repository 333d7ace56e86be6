//! Minimal reverse-mode differentiation for the rendering and loss op set,
//! plus finite-difference checking.

mod gradcheck;
mod tape;

pub use gradcheck::{
    gradcheck, relative_error, CoordinateCheck, FnObjective, GradcheckOptions, GradcheckReport, Objective,
};
pub use tape::{Fault, GradientVector, Gradients, LabelIndex, NodeId, OpKind, SamplePlan, Tape};
