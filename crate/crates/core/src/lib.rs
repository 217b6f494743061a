//! Motion embeddings learned from recomposed image sequences.
//!
//! Subsequences of a clip are resampled into forward, backward and loop
//! compositions; a CNN over frame pairs feeding an LSTM is trained so that
//! equivalent compositions embed together and inequivalent ones apart.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod ingestion;
pub mod model;
pub mod nn;
pub mod recomposer;
pub mod training;

pub use error::{Error, Result};
