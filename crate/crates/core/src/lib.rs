//! Zero-shot text classification toolkit.
//!
//! Three formalizations (binary cross-encoding, dual encoding, generative
//! multiple choice) over a pluggable encoder contract, aspect-injection
//! training strategies, benchmark corpus construction and an evaluation
//! harness.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod formalizations;
pub mod strategies;
mod util;

pub use error::{Error, Result};
