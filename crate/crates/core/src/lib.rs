//! Disturbance-aware planning and control for a quadrotor.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod artifacts;
pub mod attitude;
pub mod cbac;
pub mod ccm;
pub mod config;
pub mod disturbance;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mpc;
pub mod nn;
pub mod reference;
pub mod sdp;

pub use error::{Error, Result};
