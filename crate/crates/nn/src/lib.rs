//! Minimal reverse-mode autodiff over `ndarray`, sized for the models in
//! this workspace: recurrent sentence autoencoders, DCGAN-style convolutional
//! generators/discriminators and the latent-search optimizer.
//!
//! Everything runs in `f64`. Gradients are exact (checked against central
//! finite differences in the test suite) and every computation is
//! deterministic for a fixed seed, including under rayon parallelism: GEMM
//! work is split into fixed-size row chunks so thread count never changes
//! the floating-point reduction order.

pub mod gemm;
pub mod rng;
pub mod store;
pub mod conv;
pub mod tape;
pub mod layers;
pub mod adam;
pub mod lbfgs;

pub use store::{ParamId, VarStore};
pub use tape::{Grads, NodeId, Tape};

/// Dynamic-dimension `f64` tensor used throughout the workspace.
pub type Arr = ndarray::ArrayD<f64>;
