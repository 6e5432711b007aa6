//! Optimistic (entropic risk-seeking) evaluation and learning for tabular
//! cooperative multi-agent MDPs.

pub mod envs;
pub mod error;
pub mod harness;
pub mod instances;
pub mod learners;
pub mod mdp;
pub mod optimistic;
pub mod risk;
pub mod rng;

pub use error::{Error, Result};
