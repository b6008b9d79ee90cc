//! Pseudo-label retrieval.
//!
//! Each training sample's joint embedding is stored unit-normalized in a
//! per-language index. A query is compared against every entry of its own
//! language by cosine similarity; the top-k neighbors are returned, sorted
//! by similarity descending with ties broken by ascending id. A neighbor's
//! gold label becomes a pseudo-label only when its similarity is strictly
//! greater than the threshold `eta`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{self, IngestError};
use crate::model::{AnnotationRecord, EmotionClass, JointEmbedding, LanguageTag, Split};

/// Similarity threshold used when none is given.
pub const DEFAULT_ETA: f64 = 0.75;
/// Number of neighbors retrieved when none is given.
pub const DEFAULT_K: usize = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("retrieval pool is empty")]
    EmptyPool,
    #[error("pool record `{0}` has no gold emotion")]
    UnlabeledPoolRecord(String),
    #[error("pool record `{id}` belongs to split `{split}`, only train records may be indexed")]
    InvalidPoolSplit { id: String, split: Split },
    #[error("pool record `{record}` is paired with embedding `{embedding}`")]
    IdMismatch { record: String, embedding: String },
    #[error("duplicate pool id `{0}`")]
    DuplicateId(String),
    #[error("vector dimension {found:?} does not match {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("zero vector")]
    ZeroVector,
    #[error("no index for language `{0}`")]
    MissingLanguageIndex(LanguageTag),
    #[error("no candidates left for `{0}` after excluding it")]
    EmptyAfterExclusion(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("eta must not be NaN")]
    InvalidEta,
    #[error("query `{0}` has no embedding")]
    MissingEmbedding(String),
    #[error("index store: {0}")]
    Store(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// How a joint embedding is normalized before cosine comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMode {
    /// Normalize only the concatenated vector.
    #[default]
    Joint,
    /// Normalize the image and text parts separately, then the concatenation.
    PerPart,
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `dot(a, b) / (|a| |b|)` in 64-bit, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::DimensionMismatch {
            expected: (a.len(), 0),
            found: (b.len(), 0),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

fn scale_to_unit(v: &mut [f64]) -> Result<(), RetrievalError> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(RetrievalError::ZeroVector);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Widens an embedding to 64-bit and scales it to unit norm.
pub fn unit_vector(e: &JointEmbedding, mode: NormalizeMode) -> Result<Vec<f64>, RetrievalError> {
    let mut v = match mode {
        NormalizeMode::Joint => widen(e.joint()),
        NormalizeMode::PerPart => {
            let mut img = widen(e.image_part());
            let mut txt = widen(e.text_part());
            for part in [&mut img, &mut txt] {
                if norm(part) > 0.0 {
                    scale_to_unit(part)?;
                }
            }
            img.extend(txt);
            img
        }
    };
    scale_to_unit(&mut v)?;
    Ok(v)
}

/// Labeled, unit-normalized training vectors of one language.
#[derive(Debug, Clone)]
pub struct LanguageIndex {
    language: LanguageTag,
    dim: usize,
    ids: Vec<String>,
    labels: Vec<EmotionClass>,
    // row-major, one unit vector per entry
    vectors: Vec<f64>,
}

impl LanguageIndex {
    pub fn language(&self) -> &LanguageTag {
        &self.language
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Entries as `(id, unit vector, label)`, ordered by id.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &[f64], EmotionClass)> + '_ {
        self.ids
            .iter()
            .zip(self.vectors.chunks_exact(self.dim))
            .zip(&self.labels)
            .map(|((id, v), &l)| (id.as_str(), v, l))
    }

    /// Top-k `(entry position, similarity)` for a unit query.
    fn top_k(&self, query: &[f64], k: usize, exclude: Option<&str>) -> Vec<(usize, f64)> {
        let skip = exclude.and_then(|id| self.ids.binary_search_by(|x| x.as_str().cmp(id)).ok());
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .chunks_exact(self.dim)
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(i, v)| (i, dot(query, v).clamp(-1.0, 1.0)))
            .collect();
        // ids are sorted, so position order is id order
        let by_rank = |a: &(usize, f64), b: &(usize, f64)| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_by(by_rank);
        scored
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub sim: f64,
}

/// Result of one retrieval: ranked neighbors and the gated pseudo-label(s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalOutcome {
    pub query_id: String,
    pub neighbors: Vec<Neighbor>,
    /// Label of the best neighbor, present iff its similarity exceeds eta.
    pub pseudo_label: Option<EmotionClass>,
    /// Labels of every neighbor whose similarity exceeds eta, in rank order.
    #[serde(default)]
    pub pseudo_labels: Vec<EmotionClass>,
    #[serde(rename = "eta")]
    pub threshold_used: f64,
    pub k: usize,
}

impl RetrievalOutcome {
    /// Pseudo-label text fed to prompts: gated labels joined by ", ".
    pub fn pseudo_label_text(&self) -> Option<String> {
        if self.pseudo_labels.is_empty() {
            return self.pseudo_label.map(|l| l.name().to_string());
        }
        let names: Vec<&str> = self.pseudo_labels.iter().map(|l| l.name()).collect();
        Some(names.join(", "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalParams {
    pub k: usize,
    pub eta: f64,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            eta: DEFAULT_ETA,
        }
    }
}

/// Per-language indices built from the labeled training pool.
/// Id, label and unit vector of a pool member before grouping.
type PendingEntry<'a> = (&'a str, EmotionClass, Vec<f64>);

#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    languages: BTreeMap<LanguageTag, LanguageIndex>,
    dims: (usize, usize),
    normalize: NormalizeMode,
}

impl RetrievalIndex {
    /// Builds one index per language. Every pool record must be a labeled
    /// train record paired with its own embedding.
    pub fn build(
        pool: &[(AnnotationRecord, JointEmbedding)],
        normalize: NormalizeMode,
    ) -> Result<Self, RetrievalError> {
        let (_, first) = pool.first().ok_or(RetrievalError::EmptyPool)?;
        let dims = first.dims();
        let mut seen = HashSet::with_capacity(pool.len());
        let mut grouped: BTreeMap<LanguageTag, Vec<PendingEntry>> =
            BTreeMap::new();
        for (record, emb) in pool {
            if record.split != Split::Train {
                return Err(RetrievalError::InvalidPoolSplit {
                    id: record.id.clone(),
                    split: record.split,
                });
            }
            let label = record
                .gold_emotion
                .ok_or_else(|| RetrievalError::UnlabeledPoolRecord(record.id.clone()))?;
            if record.id != emb.id() {
                return Err(RetrievalError::IdMismatch {
                    record: record.id.clone(),
                    embedding: emb.id().to_string(),
                });
            }
            if emb.dims() != dims {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dims,
                    found: emb.dims(),
                });
            }
            if !seen.insert(record.id.as_str()) {
                return Err(RetrievalError::DuplicateId(record.id.clone()));
            }
            grouped.entry(record.language.clone()).or_default().push((
                record.id.as_str(),
                label,
                unit_vector(emb, normalize)?,
            ));
        }
        let dim = dims.0 + dims.1;
        let languages = grouped
            .into_iter()
            .map(|(language, mut entries)| {
                entries.sort_by(|a, b| a.0.cmp(b.0));
                let mut index = LanguageIndex {
                    language: language.clone(),
                    dim,
                    ids: Vec::with_capacity(entries.len()),
                    labels: Vec::with_capacity(entries.len()),
                    vectors: Vec::with_capacity(entries.len() * dim),
                };
                for (id, label, v) in entries {
                    index.ids.push(id.to_string());
                    index.labels.push(label);
                    index.vectors.extend(v);
                }
                (language, index)
            })
            .collect();
        Ok(Self {
            languages,
            dims,
            normalize,
        })
    }

    pub fn language(&self, language: &LanguageTag) -> Option<&LanguageIndex> {
        self.languages.get(language)
    }

    pub fn languages(&self) -> impl Iterator<Item = &LanguageIndex> {
        self.languages.values()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn normalize_mode(&self) -> NormalizeMode {
        self.normalize
    }

    /// Top-k same-language neighbors of `query`, optionally excluding one id
    /// (leave-one-out), with threshold-gated pseudo-labels.
    pub fn retrieve(
        &self,
        query: &JointEmbedding,
        language: &LanguageTag,
        params: RetrievalParams,
        exclude_id: Option<&str>,
    ) -> Result<RetrievalOutcome, RetrievalError> {
        if params.k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if params.eta.is_nan() {
            return Err(RetrievalError::InvalidEta);
        }
        let index = self
            .languages
            .get(language)
            .ok_or_else(|| RetrievalError::MissingLanguageIndex(language.clone()))?;
        if query.dims() != self.dims {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dims,
                found: query.dims(),
            });
        }
        let q = unit_vector(query, self.normalize)?;
        let top = index.top_k(&q, params.k, exclude_id);
        if top.is_empty() {
            return Err(RetrievalError::EmptyAfterExclusion(
                exclude_id.unwrap_or(query.id()).to_string(),
            ));
        }
        let pseudo_labels: Vec<EmotionClass> = top
            .iter()
            .take_while(|(_, sim)| *sim > params.eta)
            .map(|&(i, _)| index.labels[i])
            .collect();
        Ok(RetrievalOutcome {
            query_id: query.id().to_string(),
            neighbors: top
                .iter()
                .map(|&(i, sim)| Neighbor {
                    id: index.ids[i].clone(),
                    sim,
                })
                .collect(),
            pseudo_label: pseudo_labels.first().copied(),
            pseudo_labels,
            threshold_used: params.eta,
            k: params.k,
        })
    }

    /// Retrieves for many queries in parallel, preserving input order.
    /// Train-split queries exclude themselves when `exclude_self` is set.
    pub fn retrieve_batch(
        &self,
        queries: &[(&AnnotationRecord, &JointEmbedding)],
        params: RetrievalParams,
        exclude_self: bool,
    ) -> Result<Vec<RetrievalOutcome>, RetrievalError> {
        queries
            .par_iter()
            .map(|(record, emb)| {
                let exclude =
                    (exclude_self && record.split == Split::Train).then_some(record.id.as_str());
                self.retrieve(emb, &record.language, params, exclude)
            })
            .collect()
    }
}

/// Free-function form of [`RetrievalIndex::build`] with joint normalization.
pub fn build_index(
    pool: &[(AnnotationRecord, JointEmbedding)],
) -> Result<RetrievalIndex, RetrievalError> {
    RetrievalIndex::build(pool, NormalizeMode::Joint)
}

/// Free-function form of [`RetrievalIndex::retrieve`].
pub fn retrieve(
    query: &JointEmbedding,
    language: &LanguageTag,
    index: &RetrievalIndex,
    k: usize,
    eta: f64,
    exclude_id: Option<&str>,
) -> Result<RetrievalOutcome, RetrievalError> {
    index.retrieve(query, language, RetrievalParams { k, eta }, exclude_id)
}

/// Pairs every train record with its embedding, in record order.
pub fn train_pool(
    records: &[AnnotationRecord],
    embeddings: &[JointEmbedding],
) -> Result<Vec<(AnnotationRecord, JointEmbedding)>, RetrievalError> {
    let by_id: BTreeMap<&str, &JointEmbedding> =
        embeddings.iter().map(|e| (e.id(), e)).collect();
    records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| {
            by_id
                .get(r.id.as_str())
                .map(|e| (r.clone(), (*e).clone()))
                .ok_or_else(|| RetrievalError::MissingEmbedding(r.id.clone()))
        })
        .collect()
}

const INDEX_META: &str = "index.json";
const INDEX_POOL: &str = "pool.ecsp";

#[derive(Debug, Serialize, Deserialize)]
struct StoredEntry {
    id: String,
    language: LanguageTag,
    label: EmotionClass,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredIndex {
    version: u32,
    normalize: NormalizeMode,
    d_v: usize,
    d_t: usize,
    counts: BTreeMap<String, usize>,
    entries: Vec<StoredEntry>,
}

/// Persists a pool as `index.json` (ids, languages, labels) plus
/// `pool.ecsp` (raw vectors in the packed binary format). Loading rebuilds
/// the same index deterministically.
pub fn save_index(
    dir: &Path,
    pool: &[(AnnotationRecord, JointEmbedding)],
    normalize: NormalizeMode,
) -> Result<RetrievalIndex, RetrievalError> {
    let index = RetrievalIndex::build(pool, normalize)?;
    fs::create_dir_all(dir).map_err(|e| RetrievalError::Store(e.to_string()))?;
    let (d_v, d_t) = index.dims();
    let meta = StoredIndex {
        version: 1,
        normalize,
        d_v,
        d_t,
        counts: index
            .languages()
            .map(|l| (l.language().to_string(), l.len()))
            .collect(),
        entries: pool
            .iter()
            .map(|(r, _)| StoredEntry {
                id: r.id.clone(),
                language: r.language.clone(),
                label: r.gold_emotion.expect("checked by build"),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("index metadata serializes");
    fs::write(dir.join(INDEX_META), json).map_err(|e| RetrievalError::Store(e.to_string()))?;
    let embeddings: Vec<JointEmbedding> = pool.iter().map(|(_, e)| e.clone()).collect();
    ingest::write_embeddings_binary(&embeddings, &dir.join(INDEX_POOL))?;
    Ok(index)
}

pub fn load_index(dir: &Path) -> Result<RetrievalIndex, RetrievalError> {
    let raw =
        fs::read_to_string(dir.join(INDEX_META)).map_err(|e| RetrievalError::Store(e.to_string()))?;
    let meta: StoredIndex =
        serde_json::from_str(&raw).map_err(|e| RetrievalError::Store(e.to_string()))?;
    let embeddings = ingest::load_embeddings(&dir.join(INDEX_POOL))?;
    if embeddings.len() != meta.entries.len() {
        return Err(RetrievalError::Store(format!(
            "{} metadata entries but {} vectors",
            meta.entries.len(),
            embeddings.len()
        )));
    }
    let pool: Vec<(AnnotationRecord, JointEmbedding)> = meta
        .entries
        .into_iter()
        .zip(embeddings)
        .map(|(entry, emb)| {
            let record = AnnotationRecord {
                id: entry.id,
                art_style: "-".into(),
                language: entry.language,
                utterance: "-".into(),
                gold_emotion: Some(entry.label),
                image_ref: String::new(),
                split: Split::Train,
            };
            (record, emb)
        })
        .collect();
    let index = RetrievalIndex::build(&pool, meta.normalize)?;
    if index.dims() != (meta.d_v, meta.d_t) {
        return Err(RetrievalError::Store("dimension metadata mismatch".into()));
    }
    Ok(index)
}
