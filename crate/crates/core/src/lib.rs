//! Tracking core for one-shot multi-object trackers that re-check targets the
//! detector dropped as background.
//!
//! Previous tracklet embeddings are correlated against the current embedding
//! grid to propagate every live identity into the frame. The resulting
//! transductive detections are fused with the detector's own boxes through an
//! IOU vote before greedy association.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! anything touching the filesystem live in the `omc` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod association;
pub mod detection;
mod error;
pub mod frame;
pub mod fusion;
pub mod metrics;
pub mod numerics;
pub mod recheck;
pub mod synth;
pub mod training_math;

pub use error::{Error, Result};
