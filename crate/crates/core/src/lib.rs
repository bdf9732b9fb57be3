//! Safe policy optimisation with a learned dynamics surrogate, conformal
//! reachable sets and statistical safety certificates.

pub mod checkpoint;
pub mod conformal;
pub mod config;
pub mod dynamics;
pub mod envs;
pub mod error;
pub mod nn;
pub mod rl;
pub mod safety;
pub mod safety_loss;
pub mod seed;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
