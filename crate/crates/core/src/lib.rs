//! Discontinuous named entity recognition with gap-aware grid tagging.
//!
//! Entities are written into an `n x n` grid of word-pair labels
//! ([`tagging`]), a neural classifier predicts that grid ([`model`]), and the
//! grid is turned back into entity mentions by path search ([`decoder`]).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod model;
pub mod synth;
pub mod tagging;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
