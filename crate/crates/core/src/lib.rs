//! Two-stream CFP/OCT classification with multi-modal class activation
//! maps, loose pairing and CAM-conditioned image synthesis.

pub mod cam;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gan;
pub mod imaging;
pub mod labels;
pub mod metrics;
pub mod models;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
pub use labels::{Class, Modality, Provenance, NUM_CLASSES};
