//! Solvers for linear inverse imaging problems (deblurring, super-resolution,
//! inpainting) built around plug-and-play priors.
//!
//! The crate provides a small NCHW tensor engine with reverse-mode autodiff,
//! linear degradation operators with exact adjoints, analytic quadratic priors
//! and bias-free convolutional networks (a denoiser and a regularizer-gradient
//! network trained jointly with it), gradient-descent / ADMM / unrolled
//! solvers, and an experiment harness with deterministic, seedable runs.

pub mod cg;
pub mod degrade;
pub mod error;
pub mod fdcheck;
pub mod harness;
pub mod metrics;
pub mod priors;
pub mod solvers;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Dtype, Scalar, Tensor};
