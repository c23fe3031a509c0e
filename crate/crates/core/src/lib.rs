//! Branching inference and training for convolutional classifiers.

pub mod autograd;
pub mod branch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod impact;
pub mod layers;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod transform;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Dims, Tensor4};
