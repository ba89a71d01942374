//! Composite early-layer representations for code classification with
//! transformer encoders.
//!
//! The crate bundles a small tape-based autodiff engine ([`diffcore`]), a
//! BERT-style byte-level encoder ([`encoder`]), twelve strategies for
//! reducing per-layer hidden states to one vector ([`combiner`]),
//! fine-tuning ([`trainer`]), dataset handling ([`data`]), paired
//! statistics ([`stats`]) and a resumable experiment grid with reports
//! ([`experiment`]).

pub mod combiner;
pub mod data;
pub mod diffcore;
pub mod encoder;
mod error;
pub mod experiment;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
