//! Robust kernel machine regression.
//!
//! Robust (M-estimation based) centering of kernel Gram matrices, multi-view
//! kernel mixed models with Hadamard interaction components fitted by ReML,
//! and variance-component score tests with Satterthwaite p-values.

pub mod config;
pub mod error;
pub mod inference;
pub mod kernels;
pub mod linalg;
pub mod loss;
pub mod mixed_model;
pub mod pipeline;
pub mod robust_center;
pub mod scan;
pub mod sim;

pub use error::{Error, Result};
