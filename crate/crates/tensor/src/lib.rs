//! Dense reverse-mode automatic differentiation on a single-owner tape.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles and can
//! replay them backwards to produce exact vector-Jacobian products. Learnable
//! values live outside the tape in a [`ParamSet`]; each forward pass binds the
//! set into a fresh graph, runs backward, and pulls the leaf gradients back
//! into the set before an optimizer step.
//!
//! The scalar type is `f64` unless the `f32` feature is enabled.

mod checkpoint;
mod error;
mod gaussian;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::{Result, TensorError};
pub use gaussian::{DiagGaussian, STD_FLOOR};
pub use graph::{Graph, TraceEntry, Var};
pub use params::{ema_update, Adam, Bound, Param, ParamSet};
pub use tensor::Tensor;

/// Scalar element type of every tensor.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Scalar element type of every tensor.
#[cfg(feature = "f32")]
pub type Real = f32;

/// Name of the scalar type as written into checkpoint manifests.
#[cfg(not(feature = "f32"))]
pub const DTYPE: &str = "f64";
#[cfg(feature = "f32")]
pub const DTYPE: &str = "f32";

/// Floor applied inside `log` and `l2_normalize`.
pub const EPS: Real = 1e-8;
