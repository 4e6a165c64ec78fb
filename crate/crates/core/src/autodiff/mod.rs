//! Dense-tensor reverse-mode differentiation: exactly the operators the
//! conditioned UNet needs, each verified against central differences.

mod attention;
mod conv;
pub mod gradcheck;
mod norm;
mod ops;
mod tape;
mod tensor;

pub use attention::attention_weights;
pub use gradcheck::{grad_check, random_tensor, GradCheckReport, InputReport};
pub use norm::{BatchNormConfig, NormMode, RunningStats};
pub use ops::BCE_EPS;
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch norm needs more than one value per channel in train mode")]
    DegenerateBatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
