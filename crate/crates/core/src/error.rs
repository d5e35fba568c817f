use thiserror::Error;

use crate::packing::Collision;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid kernel {kernel_id}: {reason}")]
    InvalidKernel { kernel_id: usize, reason: String },

    #[error("kernel {kernel_id} has shape {found:?}, expected {expected:?}")]
    KernelShape {
        kernel_id: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("{} non-zero collision(s), first at position {} between kernels {} and {}",
        .0.len(), .0[0].position, .0[0].kernels.0, .0[0].kernels.1)]
    Collision(Vec<Collision>),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("length {len} is not divisible by partition size {partition}")]
    NotDivisible { len: usize, partition: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("kernel {kernel_id} breaks the {block}-element block constraint at spatial tap {tap}")]
    BlockInvariant {
        kernel_id: usize,
        tap: usize,
        block: usize,
    },

    #[error("missing tap slice: expected 9, got {0}")]
    MissingTap(usize),

    #[error("layer '{layer}': {reason}")]
    ShapeChain { layer: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;
