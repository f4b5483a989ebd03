//! Curriculum mixup for few-shot text classification.
//!
//! Training examples are scored by how confidently a first-stage model
//! separates their gold label from the best wrong label, split at the
//! median into an easy and a hard pool, and then mixed with their most
//! similar same-pool neighbour, easy pool first. Targets are smoothed with
//! the model's own predictions before being interpolated.
//!
//! The classifier is a small residual feed-forward text encoder with
//! hand-written backward passes (see [`tensor`] and [`encoder`]).

pub mod config;
pub mod corpus;
pub mod difficulty;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod mixup;
pub mod pairing;
pub mod rng;
pub mod rundir;
pub mod smoothing;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
