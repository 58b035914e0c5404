//! Curriculum-driven RL data augmentation for a synthetic fake-detection
//! task: augmentation policy, PPO, entropy environments, invariant-risk
//! bias loss, and the training engine that ties them together.

pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod engine;
pub mod environments;
pub mod error;
pub mod gradcheck;
pub mod irm;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod rewards;
pub mod schedules;
pub mod synthtask;

pub use error::{CrdaError, Result};
