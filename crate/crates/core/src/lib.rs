//! Latent world-model exploration agent for a 2D LiDAR robot.
//!
//! The crate bundles a deterministic exploration simulator, a small
//! reverse-mode differentiation substrate, a convolutional VAE + recurrent
//! state-space world model, an imagination-trained actor-critic with a
//! curiosity bonus, and the training/evaluation harness around them.

pub mod array;
pub mod behavior;
pub mod config;
pub mod curiosity;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod replay;
pub mod sim;
pub mod tape;
pub mod trainer;
pub mod world_model;

pub use array::Array;
pub use error::{Error, Result};
pub use kernels::conv_out_len;
pub use optim::Adam;
pub use params::{ParamId, ParamSet};
pub use tape::{Tape, Var};
