//! Convolutional sequence embedding for top-N sequential recommendation.
//!
//! The network embeds a user's last `L` items as an `L x d` matrix, runs
//! horizontal (union-level, max-pooled) and vertical (weighted-sum)
//! convolutions over it, maps the result through a fully-connected layer to
//! a sequence embedding `z`, and scores every item from `[z; P_u]`.
//! Training uses negative-sampled binary cross-entropy with hand-derived
//! gradients and Adam.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod rules;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{CaserError, Result};
pub use model::{Activation, ComponentMask, HyperParams, ModelParams};
pub use tensor::Matrix;
