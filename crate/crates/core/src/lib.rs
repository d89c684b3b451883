//! EEG segment classification with a temporally augmented GATv2 network.
//!
//! The crate covers the whole experimental pipeline: signal preprocessing
//! ([`dsp`]), channel-graph construction ([`graph`]), the model itself
//! ([`model`]), trial-grouped cross-validated training ([`train`]) and a
//! synthetic recording generator ([`synth`]) for end-to-end checks.

pub mod error;
pub mod diagnostics;
pub mod dsp;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
