//! Real-time traffic-accident anticipation from reused detector embeddings.
//!
//! The crate implements the full anticipation stack: a detector contract with
//! a deterministic synthetic backend, multi-scale RoI feature alignment with
//! CBAM refinement, a recurrent scene encoder, scene–object attention fusion
//! with supervised attention ranking, a queued risk classifier, the training
//! objective, evaluation metrics (AP / TTA / mTTA), a latency harness, and
//! dataset tooling for the on-disk annotation schema.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod fusion;
pub mod head;
pub mod latency;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod object_encoder;
pub mod gradcheck;
pub mod params;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
