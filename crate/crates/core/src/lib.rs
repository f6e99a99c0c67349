//! Constrained setpoint supervision for a molten-salt loop.
//!
//! The crate is organised along the control stack, bottom-up:
//!
//! - [`plant`]: lumped-parameter flibe/flinak loop used as ground truth.
//! - [`control`]: inner PI loops pairing each manipulated variable with its actuator.
//! - [`dmdc`]: snapshot logs, DMDc identification and forward state selection.
//! - [`moas`]: finite-horizon maximal output admissible sets and 2-D slices.
//! - [`governor`]: scalar reference governor, command governor and the dense QP solver.
//! - [`scenario`]: load-follow trajectories, constraint schedules and closed-loop runs.
//! - [`io`]: CSV/JSON contracts for traces, models, slices and manifests.

pub mod control;
pub mod dmdc;
pub mod error;
pub mod governor;
pub mod io;
pub mod moas;
pub mod plant;
pub mod scenario;

pub use error::{Error, Result};
