//! Multitask sentence-level discourse classification.

pub mod adapters;
pub mod augment;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod exec;
pub mod heads;
pub mod losses;
pub mod nn;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
