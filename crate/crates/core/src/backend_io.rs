//! Model backends: precomputed probability files and a minimal
//! JSON-over-HTTP prediction protocol.
//!
//! Remote protocol:
//!
//! * `POST /predict` with `{sample_id, prompt, variant_id, crop?, image_ref?}`,
//!   answered by `{probs: [9 floats]}`; any non-200 status is a protocol error.
//! * `GET /healthz` returns 200 once the server is ready.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ProbabilityVector, NUM_CLASSES, SIMPLEX_TOLERANCE};
use crate::promptgen::{count_tokens, PromptArtifact};
use crate::tta::{CropRect, TtaVariant, VariantKind};

/// Remote requests in flight at once unless configured otherwise.
pub const DEFAULT_IN_FLIGHT: usize = 8;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad row on line {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error("{context}: probabilities not on the simplex ({reason})")]
    NotOnSimplex { context: String, reason: String },
    #[error("backend `{backend}` did not answer after {attempts} attempts: {last_error}")]
    Timeout {
        backend: String,
        attempts: u32,
        last_error: String,
    },
    #[error("backend `{backend}` protocol error (status {status}): {message}")]
    Protocol {
        backend: String,
        status: u16,
        message: String,
    },
    #[error("request precondition failed for `{sample_id}`: {reason}")]
    Precondition { sample_id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    File,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_id: String,
    pub mode: BackendMode,
    /// Probability JSONL path (file mode) or base URL (remote mode).
    pub location: String,
    pub max_tokens: usize,
    #[serde(default)]
    pub expects_image: bool,
}

#[derive(Debug, Deserialize)]
struct ProbabilityRow {
    sample_id: String,
    backend_id: String,
    variant_id: String,
    probs: Vec<f64>,
}

/// Checks arity and range, then renormalizes rows whose sum is within
/// `SIMPLEX_TOLERANCE` of 1. `context` labels errors.
fn to_simplex(probs: &[f64], context: impl Fn() -> String) -> Result<[f64; NUM_CLASSES], BackendError> {
    let mut out: [f64; NUM_CLASSES] = probs.try_into().map_err(|_| BackendError::NotOnSimplex {
        context: context(),
        reason: format!("expected {NUM_CLASSES} entries, got {}", probs.len()),
    })?;
    if let Some(p) = out.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(BackendError::NotOnSimplex {
            context: context(),
            reason: format!("entry {p} outside [0, 1]"),
        });
    }
    let sum: f64 = out.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(BackendError::NotOnSimplex {
            context: context(),
            reason: format!("sum is {sum}"),
        });
    }
    if sum != 1.0 {
        out.iter_mut().for_each(|p| *p = (*p / sum).min(1.0));
    }
    Ok(out)
}

/// Reads probability JSONL, validating every row against the simplex.
pub fn load_backend_outputs(path: &Path) -> Result<Vec<ProbabilityVector>, BackendError> {
    let io = |source| BackendError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ProbabilityRow = serde_json::from_str(&line).map_err(|e| BackendError::BadRow {
            line: line_no,
            reason: e.to_string(),
        })?;
        if row.probs.len() != NUM_CLASSES {
            return Err(BackendError::BadRow {
                line: line_no,
                reason: format!("expected {NUM_CLASSES} probabilities, got {}", row.probs.len()),
            });
        }
        let probs = to_simplex(&row.probs, || format!("line {line_no}"))?;
        out.push(ProbabilityVector {
            sample_id: row.sample_id,
            backend_id: row.backend_id,
            variant_id: row.variant_id,
            probs,
        });
    }
    Ok(out)
}

pub fn write_probability_jsonl(rows: &[ProbabilityVector], path: &Path) -> Result<(), BackendError> {
    let io = |source| BackendError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for row in rows {
        let line = serde_json::to_string(row).expect("probability rows serialize");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Request body of `POST /predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub sample_id: String,
    pub prompt: String,
    pub variant_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropRect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

/// Response body of `POST /predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub request_timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_millis(250),
            request_timeout: Duration::from_secs(30),
        }
    }
}

/// One prediction to request from a remote backend.
#[derive(Debug, Clone)]
pub struct PredictJob {
    pub prompt: PromptArtifact,
    pub variant: Option<TtaVariant>,
    pub image_ref: Option<String>,
}

/// HTTP client bound to one remote backend.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    descriptor: BackendDescriptor,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl RemoteBackend {
    pub fn new(descriptor: BackendDescriptor, retry: RetryPolicy) -> Result<Self, BackendError> {
        if descriptor.mode != BackendMode::Remote {
            return Err(BackendError::Precondition {
                sample_id: String::new(),
                reason: format!("backend `{}` is not in remote mode", descriptor.backend_id),
            });
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(retry.request_timeout)
            .build()
            .map_err(|e| BackendError::Protocol {
                backend: descriptor.backend_id.clone(),
                status: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            descriptor,
            client,
            retry,
        })
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn url(&self, route: &str) -> String {
        format!("{}/{route}", self.descriptor.location.trim_end_matches('/'))
    }

    /// `GET /healthz` answered with 200.
    pub fn healthy(&self) -> bool {
        self.client
            .get(self.url("healthz"))
            .send()
            .map(|r| r.status().is_success())
            .unwrap_or(false)
    }

    /// Sends one prediction request. Transport failures are retried with
    /// exponential backoff; a non-200 answer fails immediately.
    pub fn predict(
        &self,
        prompt: &PromptArtifact,
        variant: Option<&TtaVariant>,
        image_ref: Option<&str>,
    ) -> Result<ProbabilityVector, BackendError> {
        let d = &self.descriptor;
        let precondition = |reason: String| BackendError::Precondition {
            sample_id: prompt.sample_id.clone(),
            reason,
        };
        let tokens = count_tokens(&prompt.text);
        if tokens > d.max_tokens {
            return Err(precondition(format!(
                "prompt has {tokens} tokens, backend `{}` accepts {}",
                d.backend_id, d.max_tokens
            )));
        }
        if d.expects_image != image_ref.is_some() {
            return Err(precondition(format!(
                "backend `{}` expects_image={} but image_ref is {}",
                d.backend_id,
                d.expects_image,
                if image_ref.is_some() { "set" } else { "missing" }
            )));
        }
        let variant_id = variant.map_or(VariantKind::Identity, |v| v.variant_id);
        let body = PredictRequest {
            sample_id: prompt.sample_id.clone(),
            prompt: prompt.text.clone(),
            variant_id: variant_id.as_str().to_string(),
            crop: variant.and_then(|v| v.crop),
            image_ref: image_ref.map(str::to_string),
        };

        let mut backoff = self.retry.initial_backoff;
        let mut last_error = String::new();
        for attempt in 1..=self.retry.attempts.max(1) {
            match self.client.post(self.url("predict")).json(&body).send() {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    if status != 200 {
                        let message = resp.text().unwrap_or_default();
                        return Err(BackendError::Protocol {
                            backend: d.backend_id.clone(),
                            status,
                            message,
                        });
                    }
                    let parsed: PredictResponse =
                        resp.json().map_err(|e| BackendError::Protocol {
                            backend: d.backend_id.clone(),
                            status,
                            message: e.to_string(),
                        })?;
                    if parsed.probs.len() != NUM_CLASSES {
                        return Err(BackendError::Protocol {
                            backend: d.backend_id.clone(),
                            status,
                            message: format!(
                                "expected {NUM_CLASSES} probabilities, got {}",
                                parsed.probs.len()
                            ),
                        });
                    }
                    let probs = to_simplex(&parsed.probs, || {
                        format!("{} response for `{}`", d.backend_id, body.sample_id)
                    })?;
                    return Ok(ProbabilityVector {
                        sample_id: body.sample_id,
                        backend_id: d.backend_id.clone(),
                        variant_id: body.variant_id,
                        probs,
                    });
                }
                Err(e) => {
                    log::warn!(
                        "backend {} attempt {attempt} for {} failed: {e}",
                        d.backend_id,
                        body.sample_id
                    );
                    last_error = e.to_string();
                    if attempt < self.retry.attempts {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(BackendError::Timeout {
            backend: d.backend_id.clone(),
            attempts: self.retry.attempts.max(1),
            last_error,
        })
    }

    /// Runs `jobs` with at most `in_flight` concurrent requests. Results are
    /// ordered by `(sample_id, variant_id)` regardless of completion order.
    pub fn predict_batch(
        &self,
        jobs: &[PredictJob],
        in_flight: usize,
    ) -> Result<Vec<ProbabilityVector>, BackendError> {
        let next = AtomicUsize::new(0);
        let results: Mutex<BTreeMap<(String, String), ProbabilityVector>> = Mutex::default();
        let failure: Mutex<Option<BackendError>> = Mutex::default();
        std::thread::scope(|scope| {
            for _ in 0..in_flight.max(1).min(jobs.len().max(1)) {
                scope.spawn(|| loop {
                    if failure.lock().unwrap().is_some() {
                        return;
                    }
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(job) = jobs.get(i) else { return };
                    match self.predict(&job.prompt, job.variant.as_ref(), job.image_ref.as_deref()) {
                        Ok(v) => {
                            let key = (v.sample_id.clone(), v.variant_id.clone());
                            results.lock().unwrap().insert(key, v);
                        }
                        Err(e) => {
                            failure.lock().unwrap().get_or_insert(e);
                            return;
                        }
                    }
                });
            }
        });
        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
        Ok(results.into_inner().unwrap().into_values().collect())
    }
}

/// One-shot form of [`RemoteBackend::predict`] with the default retry policy.
pub fn request_prediction(
    descriptor: &BackendDescriptor,
    prompt: &PromptArtifact,
    tta_variant: Option<&TtaVariant>,
    image_ref: Option<&str>,
) -> Result<ProbabilityVector, BackendError> {
    RemoteBackend::new(descriptor.clone(), RetryPolicy::default())?.predict(prompt, tta_variant, image_ref)
}
