//! Minimal tensor and reverse-mode differentiation substrate.

pub mod adam;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod ops;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_difference_check, finite_difference_check_with, GradCheckReport, ParamCheck};
pub use graph::{Graph, Var};
pub use tensor::{ParamId, ParamSet, Parameter, Tensor};
