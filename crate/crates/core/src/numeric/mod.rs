//! Dense tensors, define-by-run reverse-mode differentiation, the layer
//! kinds used by the model, Adam, finite-difference checking and
//! parameter snapshots.

mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod scalar;
mod tensor;

use thiserror::Error;

pub use checkpoint::{
    restore_optimizer, restore_params, snapshot_optimizer, snapshot_params, OptimizerRecord,
    ParamRecord,
};
pub use gradcheck::{grad_check, grad_check_params, GradCheckConfig, GradCheckReport, InputReport};
pub use graph::{gate_value, Gradients, Graph, NonFinite, Var};
pub use layers::{Gru, Linear, Mlp, PointEncoder};
pub use optim::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0} over an empty axis")]
    EmptyAxis(&'static str),
    #[error("parameter {0:?} registered twice")]
    DuplicateParam(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
