//! Retrieval-augmented text-to-audio generation with conditional flow matching.

pub mod codec_features;
pub mod conditioning;
pub mod curation;
pub mod embedder;
pub mod error;
pub mod flow_matching;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod retrieval_index;
pub mod seeding;

pub use error::{Error, Result};
