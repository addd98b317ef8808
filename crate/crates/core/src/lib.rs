//! Joint moment retrieval and highlight detection: features, synthetic
//! corpora, the salience-guided encoder/decoder model, losses, metrics and
//! the training harness.

pub mod decoder;
pub mod denoise;
pub mod encoder;
pub mod error;
pub mod feature_store;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod saliency;
pub mod synthetic;

pub use error::{Error, Result};
pub use feature_store::{AnnotationRecord, Dataset, FeatureMatrix, MomentSpan, Polarity, VideoRecord};
pub use metrics::{MetricsReport, RankedPredictions};
pub use harness::{evaluate, load_checkpoint, predict, save_checkpoint, train, TrainConfig, TrainOptions};
pub use model::{Model, ModelConfig, QueryMode};
