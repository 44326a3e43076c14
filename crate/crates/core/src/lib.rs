//! Construction, analysis and desk-scale training of Inception-v4 and
//! Inception-ResNet networks.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`tbin`], [`ops`], [`gradcheck`]: dense tensors and reference kernels.
//! * [`graph`]: a typed DAG IR with shape inference, validation, cost
//!   counting, execution and reverse-mode differentiation.
//! * [`zoo`]: builders for the Inception blocks and whole architectures.
//! * [`train`]: optimizers, learning-rate schedule, parameter averaging and
//!   the training loop.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod params;
pub mod tbin;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use tensor::{DType, Element, Tensor, TensorError};
