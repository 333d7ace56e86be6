//! Differentiable ray-cast ultrasound B-mode rendering.
//!
//! A 2-D tissue label map and a per-tissue acoustic parameter table are turned
//! into a B-mode image by [`renderer::render`]. The same computation can be
//! recorded on an [`autodiff::Tape`] so that any scalar loss of the image can be
//! differentiated with respect to every tissue parameter, which
//! [`tasks::optimize`] uses to adapt the table to a downstream objective.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod grid;
pub mod labelmap;
pub mod phantom;
pub mod renderer;
pub mod tasks;
pub mod tissue;

pub use error::{Error, Result};
pub use grid::{BinaryGrid, Grid};
pub use labelmap::{LabelFormat, LabelMap};
pub use renderer::{render, RenderConfig, RenderOutput};
pub use tissue::{ParamVector, ParameterTable, TissueParams};
