//! Design and verification of relaxation-optimized polarization transfer
//! for a coupled two-spin system.
//!
//! The pipeline runs: analytic bound and optimal trajectory ([`crop`]) →
//! hard-pulse discretization ([`dp`]) → broadband echo assembly ([`star`]) →
//! full Liouville-space verification ([`harness`], built on [`liouville`]).
//! [`pipeline`] chains the stages; [`io`] holds configuration and every
//! serialized format.

pub mod crop;
pub mod dp;
pub mod error;
pub mod harness;
pub mod io;
pub mod liouville;
pub mod pipeline;
pub mod star;

pub use error::{Error, Result};
pub use liouville::{Basis, ControlSettings, LiouvilleState, SpinSystem};
