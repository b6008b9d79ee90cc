//! Late fusion of per-backend probability vectors.
//!
//! The fused vector is the weighted arithmetic mean of the backends'
//! probabilities; the prediction is its argmax, ties going to the lowest
//! class index. Backends are always visited in id order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{argmax, check_simplex, EmotionClass, ProbabilityVector, NUM_CLASSES};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("ensemble config has no positive weight")]
    NoPositiveWeight,
    #[error("weight for backend `{backend}` is invalid: {weight}")]
    InvalidWeight { backend: String, weight: f64 },
    #[error("cannot read ensemble config {path}: {message}")]
    Config { path: String, message: String },
    #[error("sample `{sample_id}` is missing backend `{backend_id}`")]
    MissingBackend {
        sample_id: String,
        backend_id: String,
    },
    #[error("sample `{sample_id}`: invalid vector from backend `{backend_id}`: {reason}")]
    InvalidVector {
        sample_id: String,
        backend_id: String,
        reason: String,
    },
    #[error("sample `{sample_id}` has more than one row for backend `{backend_id}`")]
    DuplicateBackend {
        sample_id: String,
        backend_id: String,
    },
}

/// Backend weights, normalized to sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    weights: BTreeMap<String, f64>,
}

impl EnsembleConfig {
    pub fn new(weights: BTreeMap<String, f64>) -> Result<Self, EnsembleError> {
        for (backend, &weight) in &weights {
            if !weight.is_finite() || weight < 0.0 {
                return Err(EnsembleError::InvalidWeight {
                    backend: backend.clone(),
                    weight,
                });
            }
        }
        let total: f64 = weights.values().sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(EnsembleError::NoPositiveWeight);
        }
        let weights = weights.into_iter().map(|(k, w)| (k, w / total)).collect();
        Ok(Self { weights })
    }

    /// Equal weight for every listed backend.
    pub fn equal<S: AsRef<str>>(backends: &[S]) -> Result<Self, EnsembleError> {
        Self::new(
            backends
                .iter()
                .map(|b| (b.as_ref().to_string(), 1.0))
                .collect(),
        )
    }

    /// Parses `backend_id = weight` lines (TOML key/value syntax).
    pub fn parse(text: &str) -> Result<Self, EnsembleError> {
        let weights: BTreeMap<String, f64> =
            toml::from_str(text).map_err(|e| EnsembleError::Config {
                path: "<inline>".into(),
                message: e.to_string(),
            })?;
        Self::new(weights)
    }

    pub fn load(path: &Path) -> Result<Self, EnsembleError> {
        let text = std::fs::read_to_string(path).map_err(|e| EnsembleError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text).map_err(|e| match e {
            EnsembleError::Config { message, .. } => EnsembleError::Config {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn weights(&self) -> &BTreeMap<String, f64> {
        &self.weights
    }

    pub fn backends(&self) -> impl Iterator<Item = &str> {
        self.weights.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    #[serde(rename = "probs")]
    pub fused_probs: [f64; NUM_CLASSES],
    pub predicted: EmotionClass,
    #[serde(rename = "backends")]
    pub contributing_backends: Vec<String>,
}

/// Weighted mean of the configured backends' vectors for one sample.
/// Backends present in `per_backend` but absent from the config are ignored.
pub fn fuse(
    sample_id: &str,
    per_backend: &BTreeMap<String, ProbabilityVector>,
    config: &EnsembleConfig,
) -> Result<Prediction, EnsembleError> {
    let mut fused = [0.0f64; NUM_CLASSES];
    let mut contributing = Vec::with_capacity(config.weights.len());
    for (backend, &weight) in &config.weights {
        let v = per_backend
            .get(backend)
            .ok_or_else(|| EnsembleError::MissingBackend {
                sample_id: sample_id.to_string(),
                backend_id: backend.clone(),
            })?;
        check_simplex(&v.probs).map_err(|e| EnsembleError::InvalidVector {
            sample_id: sample_id.to_string(),
            backend_id: backend.clone(),
            reason: e.reason,
        })?;
        for (f, p) in fused.iter_mut().zip(&v.probs) {
            *f += weight * p;
        }
        contributing.push(backend.clone());
    }
    Ok(Prediction {
        sample_id: sample_id.to_string(),
        fused_probs: fused,
        predicted: argmax(&fused),
        contributing_backends: contributing,
    })
}

/// Groups rows by sample and fuses each group; output is sorted by sample id.
pub fn fuse_batch(
    rows: impl IntoIterator<Item = ProbabilityVector>,
    config: &EnsembleConfig,
) -> Result<Vec<Prediction>, EnsembleError> {
    let mut grouped: BTreeMap<String, BTreeMap<String, ProbabilityVector>> = BTreeMap::new();
    for row in rows {
        let per_backend = grouped.entry(row.sample_id.clone()).or_default();
        if per_backend.contains_key(&row.backend_id) {
            return Err(EnsembleError::DuplicateBackend {
                sample_id: row.sample_id,
                backend_id: row.backend_id,
            });
        }
        per_backend.insert(row.backend_id.clone(), row);
    }
    grouped
        .iter()
        .map(|(sample_id, per_backend)| fuse(sample_id, per_backend, config))
        .collect()
}
