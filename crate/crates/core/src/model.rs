//! Domain types shared by every stage of the pipeline: the emotion
//! vocabulary, language tags, annotation records, joint embeddings and
//! per-class probability vectors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Number of emotion classes.
pub const NUM_CLASSES: usize = 9;

/// Absolute tolerance on `|sum(probs) - 1|` for a valid probability vector.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown emotion `{0}`")]
pub struct UnknownEmotion(pub String);

/// Record or vector field that failed validation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid field `{field}`: {reason}")]
pub struct ValidationError {
    pub field: &'static str,
    pub reason: String,
}

impl ValidationError {
    pub fn new(field: &'static str, reason: impl Into<String>) -> Self {
        Self {
            field,
            reason: reason.into(),
        }
    }
}

/// One of the nine emotion classes, in the fixed canonical order used for
/// every vector, file and report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EmotionClass {
    Amusement,
    Awe,
    Contentment,
    Excitement,
    Anger,
    Disgust,
    Fear,
    Sadness,
    SomethingElse,
}

impl EmotionClass {
    pub const ALL: [EmotionClass; NUM_CLASSES] = [
        EmotionClass::Amusement,
        EmotionClass::Awe,
        EmotionClass::Contentment,
        EmotionClass::Excitement,
        EmotionClass::Anger,
        EmotionClass::Disgust,
        EmotionClass::Fear,
        EmotionClass::Sadness,
        EmotionClass::SomethingElse,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionClass::Amusement => "amusement",
            EmotionClass::Awe => "awe",
            EmotionClass::Contentment => "contentment",
            EmotionClass::Excitement => "excitement",
            EmotionClass::Anger => "anger",
            EmotionClass::Disgust => "disgust",
            EmotionClass::Fear => "fear",
            EmotionClass::Sadness => "sadness",
            EmotionClass::SomethingElse => "something else",
        }
    }

    /// Looks up a class by name, ignoring case and surrounding whitespace.
    /// `something else` must use a single internal space.
    pub fn from_name(name: &str) -> Result<Self, UnknownEmotion> {
        let wanted = name.trim().to_lowercase();
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == wanted)
            .ok_or_else(|| UnknownEmotion(name.to_string()))
    }
}

/// Free-function form of [`EmotionClass::from_name`].
pub fn emotion_from_name(name: &str) -> Result<EmotionClass, UnknownEmotion> {
    EmotionClass::from_name(name)
}

impl fmt::Display for EmotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionClass {
    type Err = UnknownEmotion;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_name(s)
    }
}

impl Serialize for EmotionClass {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for EmotionClass {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        EmotionClass::from_name(&s).map_err(serde::de::Error::custom)
    }
}

/// Lowercase, trimmed, non-empty language identifier (`english`, `arabic`,
/// `chinese`, ...). Compared by exact bytes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct LanguageTag(String);

impl LanguageTag {
    /// Normalizes `raw` (trim + lowercase) and rejects empty tags.
    pub fn new(raw: &str) -> Result<Self, ValidationError> {
        let value = raw.trim().to_lowercase();
        if value.is_empty() {
            return Err(ValidationError::new("language", "empty language tag"));
        }
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LanguageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for LanguageTag {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        LanguageTag::new(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(ValidationError::new(
                "split",
                format!("unknown split `{other}`"),
            )),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One image + comment sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub art_style: String,
    pub language: LanguageTag,
    pub utterance: String,
    #[serde(rename = "emotion", default, skip_serializing_if = "Option::is_none")]
    pub gold_emotion: Option<EmotionClass>,
    pub image_ref: String,
    pub split: Split,
}

impl AnnotationRecord {
    /// Checks the record invariants, naming the first violated field.
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.id.trim().is_empty() {
            return Err(ValidationError::new("id", "empty id"));
        }
        if self.art_style.trim().is_empty() {
            return Err(ValidationError::new("art_style", "empty art style"));
        }
        if self.language.as_str().is_empty() {
            return Err(ValidationError::new("language", "empty language tag"));
        }
        if self.utterance.trim().is_empty() {
            return Err(ValidationError::new("utterance", "empty utterance"));
        }
        if self.split == Split::Train && self.gold_emotion.is_none() {
            return Err(ValidationError::new(
                "gold_emotion",
                "train record has no gold emotion",
            ));
        }
        Ok(())
    }
}

/// Returns `record` unchanged when every invariant holds.
pub fn validate_record(record: AnnotationRecord) -> Result<AnnotationRecord, ValidationError> {
    record.validate()?;
    Ok(record)
}

/// Image and text embeddings of one sample plus their concatenation.
///
/// Values are stored as 32-bit floats; similarity math widens to 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEmbedding {
    id: String,
    image_part: Vec<f32>,
    text_part: Vec<f32>,
    joint: Vec<f32>,
}

impl JointEmbedding {
    /// Builds the joint vector as `image_part ++ text_part`. Rejects
    /// non-finite entries and all-zero joint vectors.
    pub fn new(
        id: impl Into<String>,
        image_part: Vec<f32>,
        text_part: Vec<f32>,
    ) -> Result<Self, ValidationError> {
        let id = id.into();
        if image_part.iter().chain(&text_part).any(|v| !v.is_finite()) {
            return Err(ValidationError::new(
                "embedding",
                format!("non-finite value in embedding `{id}`"),
            ));
        }
        let mut joint = Vec::with_capacity(image_part.len() + text_part.len());
        joint.extend_from_slice(&image_part);
        joint.extend_from_slice(&text_part);
        if joint.iter().all(|&v| v == 0.0) {
            return Err(ValidationError::new(
                "embedding",
                format!("zero joint vector for `{id}`"),
            ));
        }
        Ok(Self {
            id,
            image_part,
            text_part,
            joint,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn image_part(&self) -> &[f32] {
        &self.image_part
    }

    pub fn text_part(&self) -> &[f32] {
        &self.text_part
    }

    pub fn joint(&self) -> &[f32] {
        &self.joint
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.image_part.len(), self.text_part.len())
    }

    /// Same vectors multiplied by `factor`, under the same id.
    pub fn scaled(&self, factor: f32) -> Result<Self, ValidationError> {
        let scale = |v: &[f32]| v.iter().map(|x| x * factor).collect::<Vec<_>>();
        Self::new(self.id.clone(), scale(&self.image_part), scale(&self.text_part))
    }
}

/// Per-class probabilities from one backend for one (sample, variant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector {
    pub sample_id: String,
    pub backend_id: String,
    pub variant_id: String,
    pub probs: [f64; NUM_CLASSES],
}

impl ProbabilityVector {
    pub fn new(
        sample_id: impl Into<String>,
        backend_id: impl Into<String>,
        variant_id: impl Into<String>,
        probs: [f64; NUM_CLASSES],
    ) -> Result<Self, ValidationError> {
        let pv = Self {
            sample_id: sample_id.into(),
            backend_id: backend_id.into(),
            variant_id: variant_id.into(),
            probs,
        };
        pv.validate()?;
        Ok(pv)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        check_simplex(&self.probs)
    }

    pub fn argmax(&self) -> EmotionClass {
        argmax(&self.probs)
    }
}

/// Checks entries lie in [0,1] and sum to 1 within [`SIMPLEX_TOLERANCE`].
pub fn check_simplex(probs: &[f64]) -> Result<(), ValidationError> {
    if probs.len() != NUM_CLASSES {
        return Err(ValidationError::new(
            "probs",
            format!("expected {NUM_CLASSES} entries, got {}", probs.len()),
        ));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(ValidationError::new(
            "probs",
            format!("entry {p} outside [0, 1]"),
        ));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(ValidationError::new(
            "probs",
            format!("entries sum to {sum}, not 1"),
        ));
    }
    Ok(())
}

/// Index of the largest entry; ties resolve to the lowest class index.
pub fn argmax(probs: &[f64; NUM_CLASSES]) -> EmotionClass {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    EmotionClass::ALL[best]
}
