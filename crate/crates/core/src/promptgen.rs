//! Prompt rendering.
//!
//! Four variants are produced:
//!
//! * `sp`: the attribute prompt (art style, language, class list, utterance).
//! * `ecsp`: `sp` followed by the retrieved pseudo-label sentence.
//! * `pl`: the bare utterance followed by the pseudo-label sentence.
//! * `raw`: the bare utterance.
//!
//! Substitution is a single pass; field values are inserted verbatim and
//! never re-scanned, so braces inside an utterance survive unchanged.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AnnotationRecord, EmotionClass, ValidationError};
use crate::retrieval::RetrievalOutcome;

/// Token budget of the text-only backend.
pub const UNIMODAL_MAX_TOKENS: usize = 90;
/// Token budget of the image-text backend.
pub const MULTIMODAL_MAX_TOKENS: usize = 100;

const PSEUDO_LABEL_LEAD: &str = "The emotion this picture is most likely trying to express is";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("retrieval outcome for `{outcome}` does not match record `{record}`")]
    IdMismatch { record: String, outcome: String },
    #[error("variant `{variant}` needs a retrieval outcome for `{id}`")]
    MissingRetrieval { variant: PromptVariant, id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptVariant {
    Sp,
    Pl,
    Ecsp,
    Raw,
}

impl PromptVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptVariant::Sp => "sp",
            PromptVariant::Pl => "pl",
            PromptVariant::Ecsp => "ecsp",
            PromptVariant::Raw => "raw",
        }
    }

    pub fn needs_retrieval(self) -> bool {
        matches!(self, PromptVariant::Pl | PromptVariant::Ecsp)
    }
}

impl std::fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sp" => Ok(PromptVariant::Sp),
            "pl" => Ok(PromptVariant::Pl),
            "ecsp" => Ok(PromptVariant::Ecsp),
            "raw" => Ok(PromptVariant::Raw),
            other => Err(format!("unknown prompt variant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptArtifact {
    pub sample_id: String,
    pub variant: PromptVariant,
    pub text: String,
    #[serde(rename = "pseudo_label")]
    pub pseudo_label_used: Option<EmotionClass>,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PromptOptions {
    /// Repeat the utterance after the simple prompt in `ecsp`, following the
    /// literal `{Simple prompt}. {Input text}.` composite.
    pub duplicate_utterance: bool,
    pub max_tokens: Option<usize>,
}

fn simple_text(record: &AnnotationRecord) -> String {
    format!(
        "The art style of image is {}. There is a comment from a {} person. \
         What emotions did he express? amusement, awe, contentment, excitement, \
         anger, disgust, fear, sadness or something else,{}.",
        record.art_style, record.language, record.utterance
    )
}

fn pseudo_sentence(label: &str) -> String {
    format!("{PSEUDO_LABEL_LEAD} {label}.")
}

fn check_ids(record: &AnnotationRecord, outcome: &RetrievalOutcome) -> Result<(), PromptError> {
    if record.id != outcome.query_id {
        return Err(PromptError::IdMismatch {
            record: record.id.clone(),
            outcome: outcome.query_id.clone(),
        });
    }
    Ok(())
}

pub fn render_simple(record: &AnnotationRecord) -> Result<PromptArtifact, PromptError> {
    record.validate()?;
    Ok(PromptArtifact {
        sample_id: record.id.clone(),
        variant: PromptVariant::Sp,
        text: simple_text(record),
        pseudo_label_used: None,
        truncated: false,
    })
}

/// Simple prompt plus the pseudo-label sentence. Without a pseudo-label the
/// text is exactly the simple prompt.
pub fn render_ecsp(
    record: &AnnotationRecord,
    outcome: &RetrievalOutcome,
    duplicate_utterance: bool,
) -> Result<PromptArtifact, PromptError> {
    check_ids(record, outcome)?;
    let mut artifact = render_simple(record)?;
    artifact.variant = PromptVariant::Ecsp;
    if let Some(label) = outcome.pseudo_label_text() {
        if duplicate_utterance {
            artifact.text.push(' ');
            artifact.text.push_str(&record.utterance);
            artifact.text.push('.');
        }
        artifact.text.push(' ');
        artifact.text.push_str(&pseudo_sentence(&label));
        artifact.pseudo_label_used = outcome.pseudo_label;
    }
    Ok(artifact)
}

/// Utterance plus the pseudo-label sentence; the bare utterance when no
/// pseudo-label passed the threshold.
pub fn render_pseudo_only(
    record: &AnnotationRecord,
    outcome: &RetrievalOutcome,
) -> Result<PromptArtifact, PromptError> {
    check_ids(record, outcome)?;
    record.validate()?;
    let (text, used) = match outcome.pseudo_label_text() {
        Some(label) => (
            format!("{}. {}", record.utterance, pseudo_sentence(&label)),
            outcome.pseudo_label,
        ),
        None => (record.utterance.clone(), None),
    };
    Ok(PromptArtifact {
        sample_id: record.id.clone(),
        variant: PromptVariant::Pl,
        text,
        pseudo_label_used: used,
        truncated: false,
    })
}

pub fn render_raw(record: &AnnotationRecord) -> Result<PromptArtifact, PromptError> {
    record.validate()?;
    Ok(PromptArtifact {
        sample_id: record.id.clone(),
        variant: PromptVariant::Raw,
        text: record.utterance.clone(),
        pseudo_label_used: None,
        truncated: false,
    })
}

/// Renders any variant and applies the token budget from `options`.
pub fn render(
    variant: PromptVariant,
    record: &AnnotationRecord,
    outcome: Option<&RetrievalOutcome>,
    options: PromptOptions,
) -> Result<PromptArtifact, PromptError> {
    let needs = || PromptError::MissingRetrieval {
        variant,
        id: record.id.clone(),
    };
    let mut artifact = match variant {
        PromptVariant::Sp => render_simple(record)?,
        PromptVariant::Raw => render_raw(record)?,
        PromptVariant::Ecsp => {
            render_ecsp(record, outcome.ok_or_else(needs)?, options.duplicate_utterance)?
        }
        PromptVariant::Pl => render_pseudo_only(record, outcome.ok_or_else(needs)?)?,
    };
    if let Some(max) = options.max_tokens {
        let (text, truncated) = truncate_tokens(&artifact.text, max);
        artifact.text = text;
        artifact.truncated = truncated;
    }
    Ok(artifact)
}

/// Number of whitespace-delimited tokens.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Keeps the first `max_tokens` whitespace-delimited tokens. Text up to the
/// end of the last kept token is preserved verbatim.
pub fn truncate_tokens(text: &str, max_tokens: usize) -> (String, bool) {
    let max_tokens = max_tokens.max(1);
    let mut seen = 0;
    let mut in_token = false;
    for (pos, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if in_token && seen == max_tokens {
                let rest = &text[pos..];
                if rest.trim_start().is_empty() {
                    break;
                }
                return (text[..pos].to_string(), true);
            }
            in_token = false;
        } else if !in_token {
            in_token = true;
            seen += 1;
        }
    }
    (text.to_string(), false)
}
