use thiserror::Error;

use crate::backend_io::BackendError;
use crate::ensemble::EnsembleError;
use crate::ingest::IngestError;
use crate::metrics::MetricsError;
use crate::model::{UnknownEmotion, ValidationError};
use crate::promptgen::PromptError;
use crate::retrieval::RetrievalError;
use crate::tta::TtaError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    UnknownEmotion(#[from] UnknownEmotion),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Tta(#[from] TtaError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().display().to_string();
        move |source| Error::Io { path, source }
    }

    /// Stable `module.kind` identifier for machine-readable error output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Validation(_) => "model.validation",
            Error::UnknownEmotion(_) => "model.unknown_emotion",
            Error::Ingest(e) => match e {
                IngestError::Io { .. } => "ingest.io",
                IngestError::Parse { .. } => "ingest.parse",
                IngestError::DuplicateId(_) => "ingest.duplicate_id",
                IngestError::Validation { .. } => "ingest.validation",
                IngestError::DimensionMismatch { .. } => "ingest.dimension_mismatch",
                IngestError::CorruptFile { .. } => "ingest.corrupt_file",
                IngestError::ZeroVector(_) => "ingest.zero_vector",
                IngestError::EmptyInput => "ingest.empty_input",
                IngestError::IdTooLong(_) => "ingest.id_too_long",
                IngestError::UnknownEmbeddingId(_) => "ingest.unknown_embedding_id",
            },
            Error::Retrieval(e) => match e {
                RetrievalError::EmptyPool => "retrieval.empty_pool",
                RetrievalError::UnlabeledPoolRecord(_) => "retrieval.unlabeled_pool_record",
                RetrievalError::InvalidPoolSplit { .. } => "retrieval.invalid_pool_split",
                RetrievalError::IdMismatch { .. } => "retrieval.id_mismatch",
                RetrievalError::DuplicateId(_) => "retrieval.duplicate_id",
                RetrievalError::DimensionMismatch { .. } => "retrieval.dimension_mismatch",
                RetrievalError::ZeroVector => "retrieval.zero_vector",
                RetrievalError::MissingLanguageIndex(_) => "retrieval.missing_language_index",
                RetrievalError::EmptyAfterExclusion(_) => "retrieval.empty_after_exclusion",
                RetrievalError::InvalidK => "retrieval.invalid_k",
                RetrievalError::InvalidEta => "retrieval.invalid_eta",
                RetrievalError::MissingEmbedding(_) => "retrieval.missing_embedding",
                RetrievalError::Store(_) => "retrieval.store",
                RetrievalError::Ingest(_) => "retrieval.ingest",
            },
            Error::Prompt(e) => match e {
                PromptError::Validation(_) => "prompt.validation",
                PromptError::IdMismatch { .. } => "prompt.id_mismatch",
                PromptError::MissingRetrieval { .. } => "prompt.missing_retrieval",
            },
            Error::Tta(e) => match e {
                TtaError::InvalidSize { .. } => "tta.invalid_size",
                TtaError::InvalidCropFraction(_) => "tta.invalid_crop_fraction",
                TtaError::ShapeMismatch { .. } => "tta.shape_mismatch",
                TtaError::CropOutOfBounds { .. } => "tta.crop_out_of_bounds",
                TtaError::MissingCrop => "tta.missing_crop",
                TtaError::Empty => "tta.empty",
                TtaError::MixedSample(_) => "tta.mixed_sample",
                TtaError::DuplicateVariant(_) => "tta.duplicate_variant",
            },
            Error::Ensemble(e) => match e {
                EnsembleError::NoPositiveWeight => "ensemble.no_positive_weight",
                EnsembleError::InvalidWeight { .. } => "ensemble.invalid_weight",
                EnsembleError::Config { .. } => "ensemble.config",
                EnsembleError::MissingBackend { .. } => "ensemble.missing_backend",
                EnsembleError::InvalidVector { .. } => "ensemble.invalid_vector",
                EnsembleError::DuplicateBackend { .. } => "ensemble.duplicate_backend",
            },
            Error::Metrics(MetricsError::EmptyInput) => "metrics.empty_input",
            Error::Backend(e) => match e {
                BackendError::Io { .. } => "backend.io",
                BackendError::BadRow { .. } => "backend.bad_row",
                BackendError::NotOnSimplex { .. } => "backend.not_on_simplex",
                BackendError::Timeout { .. } => "backend.timeout",
                BackendError::Protocol { .. } => "backend.protocol",
                BackendError::Precondition { .. } => "backend.precondition",
            },
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Input(_) => "input",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
