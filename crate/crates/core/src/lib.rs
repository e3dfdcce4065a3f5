//! Video-to-text generation with a two-stage pre-training pipeline, at desk
//! scale: a small encoder-decoder transformer that reads frame sequences,
//! intermediate video-text pre-training tasks, staged training with beam
//! search, and the usual caption metrics.

pub mod exec;
pub mod media;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use exec::Exec;
