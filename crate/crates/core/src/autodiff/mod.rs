//! Reverse-mode automatic differentiation over rank 0–2 tensors.

mod check;
pub mod checkpoint;
mod tape;
mod tensor;
mod var;

pub use check::{grad_check, GradCheck};
pub use tape::{ParamStore, Tape};
pub use tensor::{argmax, Shape, Tensor};
pub use var::{phi_pwl, Var, LOG_FLOOR};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch { op: &'static str, left: Shape, right: Shape },
    #[error("loss must be scalar, got {0}")]
    NonScalarLoss(Shape),
    #[error("graph contains a cycle")]
    Cycle,
    #[error("backward called twice without reset")]
    BackwardTwice,
    #[error("parameter {0} registered twice")]
    DuplicateParameter(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
}
