//! Reward-conditioned policies: reinforcement learning by iterated,
//! target-conditioned supervised regression.

pub mod envs;
pub mod error;
pub mod estimators;
pub mod io;
pub mod numerics;
pub mod policy;
pub mod replay;
pub mod rng;
pub mod target_model;
pub mod trainer;

pub use error::{Error, Result};
