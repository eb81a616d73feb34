//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive as it runs. Calling
//! [`Graph::backward`] on a scalar node walks the record once in reverse and
//! accumulates gradients by addition. All math is `f64`.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Fault, Graph, Mode, Var};
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("expected a scalar output, got {numel} elements")]
    NotScalar { numel: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[cfg(test)]
mod tests;
