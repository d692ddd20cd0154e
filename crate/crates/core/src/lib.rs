//! Energy-aware lane selection for battery-electric vehicles on signalized
//! two-lane roads.
//!
//! The planner enumerates the four pass/lane candidates for the next traffic
//! light, solves a convex finite-horizon QP for each, adds a shortest-path
//! cost-to-go over the following lights, and keeps the cheapest. The
//! simulator closes the loop around it with car-following traffic and
//! cycling signals so the eco planner can be compared against a human-like
//! driver and a lane-keeping eco baseline.

pub mod cli;
pub mod energy;
pub mod error;
pub mod graph;
pub mod ocp;
pub mod qp;
pub mod report;
pub mod scenario;
pub mod selector;
pub mod signal;
pub mod sim;
pub mod world;

pub use error::{Error, Result};
