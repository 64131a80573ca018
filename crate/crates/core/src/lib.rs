//! Latent world-model planning for continuous control.
//!
//! A TD-MPC style world model (encoder, latent dynamics, reward head,
//! Q-ensemble, state-value head and policy prior) is pretrained on offline
//! episodes and then finetuned online by planning with MPPI. The planner
//! penalizes estimated returns by the disagreement of the Q-ensemble, and
//! that penalty strength can be changed at test time without retraining.

pub mod config;
pub mod error;
pub mod envs;
pub mod netcore;
pub mod pipeline;
pub mod planner;
pub mod replay;
pub mod worldmodel;

pub use error::{Error, Result};
