//! Co-training a policy and its own judge from verifiable rewards.
//!
//! A single small model solves synthetic verifiable tasks, is trained with
//! group-standardized policy gradients, and recycles its scored rollouts
//! into judgment and revision tasks that train the same model. At test time
//! the model judges its own answers and revises the ones it rejects.

pub mod cli;
pub mod error;
pub mod grpo;
pub mod metrics;
pub mod par;
pub mod policy;
pub mod recycle;
pub mod rng;
pub mod rollout;
pub mod tasks;
pub mod tts;
pub mod verifier;

pub use error::{Error, Result};
