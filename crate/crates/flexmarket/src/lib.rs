//! Real-time flexibility market on a distribution network.
//!
//! Consumers bid linear supply functions to a balance responsible party,
//! the distribution system operator keeps allocations inside the linearized
//! power-flow security limits, and a semi-decentralized forward-backward
//! iteration drives the bids to the variational generalized Nash
//! equilibrium. Modules:
//!
//! - [`grid`]: network model, linear lossless power flow, feasible set.
//! - [`market`]: pay-as-clear price and allocation.
//! - [`game`]: cost model, pseudo-gradient, game constants, step sizes,
//!   price of anarchy.
//! - [`qpsolve`]: ADMM conic QP solver with active-set polishing, and the
//!   welfare / shadow / projection problems built on it.
//! - [`gne`]: the message-passing market iteration.
//! - [`cli`]: scenario files, campaigns and report writers.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod game;
pub mod gne;
pub mod grid;
pub mod market;
pub mod qpsolve;

pub use error::{Error, Result};
