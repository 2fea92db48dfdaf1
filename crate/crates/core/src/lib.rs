//! Policy-gradient post-training for small token policies on grid tasks.
//!
//! States are token/image segment lists ([`proto`]); a one-layer transformer
//! ([`policy`]) acts in single- and multi-turn environments ([`env`]) scored
//! by composable rewards ([`reward`]). Advantage estimators, policy losses and
//! KL control live in [`algo`] behind a string-keyed [`algo::Registry`], and
//! [`pipeline::Trainer`] drives rollout, scoring, estimation and updates.

pub mod algo;
pub mod cli;
pub mod config;
pub mod engine;
pub mod env;
pub mod error;
pub mod pipeline;
pub mod policy;
pub mod proto;
pub mod reward;
pub mod rng;
pub mod roles;

pub use error::{Error, Result};
