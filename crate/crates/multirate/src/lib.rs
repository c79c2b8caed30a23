#![forbid(unsafe_code)]

//! Rate-allocation game engine for multi-rate multicast sessions on
//! capacitated links.
//!
//! Receivers post one rate request plus per-link prices; the outcome function
//! hands every receiver its requested rate and charges a per-link tax that is
//! differentiable in the allocations. The crate computes outcomes, searches
//! for Nash equilibria of the induced game, solves the centralized welfare
//! problem as an independent reference, and verifies the equilibrium
//! properties the design targets: feasibility, budget balance, individual
//! rationality, and efficiency.

pub mod checker;
pub mod cli;
pub mod equilibrium;
mod error;
pub mod io;
pub mod mechanism;
pub mod model;
pub mod oracle;

pub use error::{Error, Result};
