//! Clipped importance-sampling policy-gradient lab.
//!
//! Token-level weighting strategies ([`coefficients`]), tabular policies and
//! synthetic verifiable tasks ([`policy`], [`environment`]), an off-policy
//! group-rollout trainer ([`trainer`]), and exact/analytic bias oracles
//! ([`bias_lab`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advantage;
pub mod bias_lab;
pub mod cli;
pub mod coefficients;
pub mod config;
pub mod environment;
pub mod error;
pub mod metrics;
pub mod policy;
pub mod regions;
pub mod trainer;

pub use error::{Error, Result};
