//! Hybrid CNN/transformer single-image super-resolution.
//!
//! Two parallel branches (residual channel attention CNN blocks and
//! transformer blocks with cross-scale token attention) exchange features
//! through fusion blocks. Everything runs on a small double-precision
//! reverse-mode autodiff engine so every layer can be gradient-checked.

pub mod attention;
pub mod cnn;
pub mod complexity;
pub mod error;
pub mod flops;
pub mod fusion;
pub mod gradcheck;
pub mod image_io;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod tokenization;
pub mod train;

pub use error::{ActError, Result};
pub use tensor::{backward, Gradients, Tensor, Var};
