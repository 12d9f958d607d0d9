//! Dialogue state tracking with two encoder variants — a globally-conditioned
//! encoder (GCE) that shares one recurrent module across all slots, and a
//! global-local (GLAD-style) baseline with dedicated per-slot modules — plus
//! training, evaluation metrics, corpus handling, and a latency benchmark
//! harness comparing the two.

pub mod autodiff;
pub mod bench;
pub mod data;
pub mod encoders;
pub mod layers;
pub mod model;
pub mod scorer;
pub mod tracker;
pub mod training;
pub mod error;

pub use error::{Error, Result};
