//! Model-based reinforcement learning with prototypical context learning.
//!
//! A recurrent state-space world model is trained on replayed episodes from
//! environments whose dynamics parameters change between episodes. Latent
//! states are projected onto a bank of learned prototypes to form a context
//! embedding, and an actor-critic is trained entirely in imagination on the
//! resulting features.

pub mod behavior;
pub mod check;
pub mod config;
pub mod env;
mod error;
pub mod nn;
pub mod proto;
pub mod replay;
pub mod trainer;
pub mod update;
pub mod world_model;

pub use error::{Error, Result};
pub use protocad_tensor::Real;
