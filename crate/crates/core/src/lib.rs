//! Confidence-gated routing between a cheap local model and an expensive
//! remote one.
//!
//! The pipeline: annotate a training split with confidence tokens built from
//! the base model's own predictions, fine-tune with answer tokens of wrong
//! predictions masked out, read the confidence score off the `<CN>`/`<UN>`
//! probabilities, and use it to route, abstain, or measure calibration.

pub mod annotator;
pub mod backend;
pub mod calibration;
pub mod cli;
pub mod confidence;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gateway;
pub mod mock_backend;
pub mod pipeline;
pub mod rejection;
pub mod routing;
pub mod synth;
pub mod tinylm;
pub mod types;

pub use error::{Error, Result};
pub use types::{AnswerValue, Choice, Dataset, PredictionRecord, QueryRecord, RngSeed, SplitTag};
