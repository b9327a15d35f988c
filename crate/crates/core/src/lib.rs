//! Goal-conditioned DDPG/MADDPG with hindsight and competitive experience
//! replay on 2D point-mass mazes.

pub mod agent;
pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod metrics;
pub mod net;
pub mod replay;
pub mod selftest;
pub mod trainer;

pub use error::{Error, Result};
