//! Few-step distillation of a flow-matching velocity network.
//!
//! The pipeline runs in three stages on synthetic conditioned sequence data:
//!
//! 1. [`ccd`]: continuous-time consistency distillation from a trained
//!    teacher, with the tangent computed by block-wise forward mode.
//! 2. [`dist_align`]: hinge-loss adversarial alignment of the one-step
//!    prediction against real data.
//! 3. [`traj_align`]: preference optimization on pairs sampled from the
//!    model itself at a high and a low step count, regularized by a reflow loss.
//!
//! [`metrics`] scores models with a Fréchet distance in a frozen feature space
//! and with trajectory-level diagnostics.

pub mod ccd;
pub mod dist_align;
mod error;
pub mod flow;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod traj_align;

pub use error::{Error, Result};
