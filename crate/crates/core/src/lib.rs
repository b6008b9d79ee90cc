//! Emotion classification for art-grounded utterances with retrieval-derived
//! pseudo-labels, test-time augmentation and late fusion of backend outputs.

pub mod backend_io;
pub mod ensemble;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod promptgen;
pub mod retrieval;
pub mod tta;

pub use error::{Error, Result};
pub use model::{
    AnnotationRecord, EmotionClass, JointEmbedding, LanguageTag, ProbabilityVector, Split,
    NUM_CLASSES,
};
