//! Asynchronous push-sum dual gradient (APDG) for distributed model
//! predictive control over directed networks.
//!
//! The pipeline runs bottom-up: [`model`] condenses each subsystem over the
//! horizon, [`polytope`] builds terminal sets, [`qp`] solves the local inner
//! problems, [`apdg`] holds the per-node state machine, [`netsim`] drives it
//! through a seeded discrete-event network and [`dmpc`] closes the loop.

// `!(a <= b)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod apdg;
pub mod config;
pub mod dmpc;
pub mod error;
pub mod linalg;
pub mod model;
pub mod netsim;
pub mod polytope;
pub mod qp;

pub use error::{Error, Result};
