//! Streaming spatio-temporal grounding with memory-augmented query decoders.
//!
//! Frames are processed one at a time. A multimodal encoder fuses appearance,
//! motion and query text; a spatial decoder predicts the target box, a
//! temporal decoder (fed with motion pooled under that box) predicts whether
//! the queried event starts or ends at the frame. Each decoder keeps a memory
//! bank of its past queries and attends to a selected subset of it.
//!
//! The crate also contains a synthetic episode generator standing in for
//! real videos, the training loop, metrics and an ablation harness.

pub mod ablation;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod loss;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod train;
pub mod world;

pub use boxes::BBox;
pub use config::RunConfig;
pub use engine::{decode_segment, ground, ground_episode, step, StreamState, TubePrediction};
pub use error::{Error, Result};
pub use model::Model;
pub use world::{generate_episode, Episode};
