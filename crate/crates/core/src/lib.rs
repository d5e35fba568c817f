//! Complementary-sparsity inference kernels.
//!
//! Sparse int8 kernels with disjoint supports are overlaid into dense
//! augmented tensors of (weight, kernel ID) pairs. Convolution and linear
//! layers then run as gather, multiply, route and sum, with k-WTA providing
//! sparse activations. A dense oracle checks every operator bit for bit.

pub mod error;
pub mod kernels;
pub mod kwta;
pub mod network;
pub mod oracle;
pub mod packing;
pub mod resource_model;
pub mod tensor;

pub use error::{Error, Result};
pub use kernels::{ConvConfig, MacCounts};
pub use kwta::{KwtaConfig, KwtaMode, SparseActivation, SparseMap, Winner};
pub use packing::{AugmentedEntry, AugmentedWeightTensor, Mask, NULL_KERNEL_ID};
pub use tensor::{AccTensor, QTensor, Requantizer, SparseKernel, Tensor};
