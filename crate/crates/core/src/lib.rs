//! Optimistic policy search by dynamic programming for linearly
//! Q-realizable layered MDPs, with exact dynamic-programming oracles, a
//! cost-sensitive-classification oracle built on sign-region enumeration,
//! and a verification suite for the structural properties the method rests
//! on.

pub mod csc;
pub mod dp;
pub mod error;
pub mod expectation;
pub mod fixtures;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod mdp;
pub mod metrics;
pub mod params;
pub mod policy;
pub mod precond;
pub mod psdp;
pub mod realizability;
pub mod verify;

pub use error::{Error, Result};
