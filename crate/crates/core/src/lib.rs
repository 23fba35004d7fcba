//! Jerk-level safe control for serial manipulators sharing space with moving
//! agents, with a trajectory controller, simulator and telemetry types.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod error;
pub mod geometry;
pub mod jpc;
pub mod kinematics;
pub mod safeguard;
pub mod safety_index;
pub mod sim;
pub mod wire;

pub use error::{Error, Result};
