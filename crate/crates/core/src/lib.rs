//! Training and inference engine for a lightweight expand-squeeze,
//! dual multiscale residual encoder-decoder (ESDMR-Net) for binary medical
//! image segmentation.
//!
//! Everything runs on the CPU over the crate's own [`Tensor`] type and
//! reverse-mode [`Graph`]. Image tensors are NCHW, row-major.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, grad_check_at, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::{Rng, Scalar, Tensor};
