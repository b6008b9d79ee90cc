//! Loading and persisting annotation datasets and embedding files.
//!
//! Annotations come as JSONL or CSV (columns matched by header name).
//! Embeddings come as JSONL (`{id, image_embed, text_embed}`) or as a packed
//! little-endian binary file:
//!
//! ```text
//! "ECSP" | u16 version=1 | u32 d_v | u32 d_t | u32 count
//! count x ( u16 id_len | id bytes (UTF-8) | (d_v + d_t) x f32 )
//! ```
//!
//! There is no padding; the image part precedes the text part.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AnnotationRecord, EmotionClass, JointEmbedding, LanguageTag, Split, ValidationError,
};

pub const BINARY_MAGIC: &[u8; 4] = b"ECSP";
pub const BINARY_VERSION: u16 = 1;
/// magic + version + d_v + d_t + count
pub const BINARY_HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("line {line}: {source}")]
    Validation {
        line: usize,
        source: ValidationError,
    },
    #[error("embedding `{id}` has dimensions {found:?}, expected {expected:?}")]
    DimensionMismatch {
        id: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("corrupt embedding file at byte offset {offset}: {reason}")]
    CorruptFile { offset: usize, reason: String },
    #[error("embedding `{0}` is an all-zero vector")]
    ZeroVector(String),
    #[error("no embeddings to write")]
    EmptyInput,
    #[error("id `{0}` is longer than 65535 bytes")]
    IdTooLong(String),
    #[error("embedding id `{0}` has no annotation record")]
    UnknownEmbeddingId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationFormat {
    Jsonl,
    Csv,
}

impl AnnotationFormat {
    /// Guesses the format from a file extension; anything but `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => AnnotationFormat::Csv,
            _ => AnnotationFormat::Jsonl,
        }
    }
}

impl FromStr for AnnotationFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(AnnotationFormat::Jsonl),
            "csv" => Ok(AnnotationFormat::Csv),
            other => Err(format!("unknown annotation format `{other}`")),
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawAnnotation {
    id: String,
    art_style: String,
    language: String,
    utterance: String,
    split: String,
    #[serde(default)]
    image_ref: String,
    #[serde(default)]
    emotion: Option<String>,
}

impl RawAnnotation {
    fn into_record(self, line: usize) -> Result<AnnotationRecord, IngestError> {
        let invalid = |source| IngestError::Validation { line, source };
        let gold_emotion = match self.emotion.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(name) => Some(
                EmotionClass::from_name(name)
                    .map_err(|e| invalid(ValidationError::new("emotion", e.to_string())))?,
            ),
        };
        let record = AnnotationRecord {
            id: self.id,
            art_style: self.art_style,
            language: LanguageTag::new(&self.language).map_err(invalid)?,
            utterance: self.utterance,
            gold_emotion,
            image_ref: self.image_ref,
            split: Split::from_str(&self.split).map_err(invalid)?,
        };
        record.validate().map_err(invalid)?;
        Ok(record)
    }
}

fn open(path: &Path) -> Result<File, IngestError> {
    File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads validated annotation records, preserving file order.
pub fn load_annotations(
    path: &Path,
    format: AnnotationFormat,
) -> Result<Vec<AnnotationRecord>, IngestError> {
    let file = open(path)?;
    let records = match format {
        AnnotationFormat::Jsonl => parse_annotations_jsonl(BufReader::new(file), path)?,
        AnnotationFormat::Csv => parse_annotations_csv(file)?,
    };
    let mut seen = HashSet::with_capacity(records.len());
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(IngestError::DuplicateId(r.id.clone()));
        }
    }
    Ok(records)
}

fn parse_annotations_jsonl(
    reader: impl BufRead,
    path: &Path,
) -> Result<Vec<AnnotationRecord>, IngestError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawAnnotation =
            serde_json::from_str(&line).map_err(|e| IngestError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        records.push(raw.into_record(line_no)?);
    }
    Ok(records)
}

fn parse_annotations_csv(file: File) -> Result<Vec<AnnotationRecord>, IngestError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::Headers).from_reader(file);
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<RawAnnotation>().enumerate() {
        // line 1 is the header
        let line_no = i + 2;
        let raw = row.map_err(|e| IngestError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        records.push(raw.into_record(line_no)?);
    }
    Ok(records)
}

/// Writes records as annotation JSONL.
pub fn write_annotations_jsonl(
    records: &[AnnotationRecord],
    path: &Path,
) -> Result<(), IngestError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingRow {
    id: String,
    image_embed: Vec<f32>,
    text_embed: Vec<f32>,
}

/// Loads embeddings from either the packed binary format (detected by its
/// magic bytes) or JSONL. Dimensions must match the first entry.
pub fn load_embeddings(path: &Path) -> Result<Vec<JointEmbedding>, IngestError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(BINARY_MAGIC) {
        decode_binary(&bytes)
    } else {
        parse_embeddings_jsonl(&bytes)
    }
}

fn parse_embeddings_jsonl(bytes: &[u8]) -> Result<Vec<JointEmbedding>, IngestError> {
    let text = std::str::from_utf8(bytes).map_err(|e| IngestError::CorruptFile {
        offset: e.valid_up_to(),
        reason: "invalid UTF-8".into(),
    })?;
    let mut checker = EmbeddingChecker::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: EmbeddingRow = serde_json::from_str(line).map_err(|e| IngestError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        checker.push(row.id, row.image_embed, row.text_embed, i + 1)?;
    }
    Ok(checker.out)
}

#[derive(Default)]
struct EmbeddingChecker {
    dims: Option<(usize, usize)>,
    seen: HashSet<String>,
    out: Vec<JointEmbedding>,
}

impl EmbeddingChecker {
    fn push(
        &mut self,
        id: String,
        image: Vec<f32>,
        text: Vec<f32>,
        line: usize,
    ) -> Result<(), IngestError> {
        let found = (image.len(), text.len());
        match self.dims {
            None => self.dims = Some(found),
            Some(expected) if expected != found => {
                return Err(IngestError::DimensionMismatch {
                    id,
                    expected,
                    found,
                })
            }
            Some(_) => {}
        }
        if !self.seen.insert(id.clone()) {
            return Err(IngestError::DuplicateId(id));
        }
        if image.iter().chain(&text).all(|&v| v == 0.0) {
            return Err(IngestError::ZeroVector(id));
        }
        let emb = JointEmbedding::new(id, image, text)
            .map_err(|source| IngestError::Validation { line, source })?;
        self.out.push(emb);
        Ok(())
    }
}

fn check_uniform(embeddings: &[JointEmbedding]) -> Result<(usize, usize), IngestError> {
    let first = embeddings.first().ok_or(IngestError::EmptyInput)?;
    let expected = first.dims();
    for e in embeddings {
        if e.dims() != expected {
            return Err(IngestError::DimensionMismatch {
                id: e.id().to_string(),
                expected,
                found: e.dims(),
            });
        }
    }
    Ok(expected)
}

/// Serializes embeddings into the packed binary format.
pub fn encode_binary(embeddings: &[JointEmbedding]) -> Result<Vec<u8>, IngestError> {
    let (dv, dt) = check_uniform(embeddings)?;
    let payload: usize = embeddings
        .iter()
        .map(|e| 2 + e.id().len() + 4 * (dv + dt))
        .sum();
    let mut buf = Vec::with_capacity(BINARY_HEADER_LEN + payload);
    buf.extend_from_slice(BINARY_MAGIC);
    buf.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dv as u32).to_le_bytes());
    buf.extend_from_slice(&(dt as u32).to_le_bytes());
    buf.extend_from_slice(&(embeddings.len() as u32).to_le_bytes());
    for e in embeddings {
        let id = e.id().as_bytes();
        let id_len =
            u16::try_from(id.len()).map_err(|_| IngestError::IdTooLong(e.id().to_string()))?;
        buf.extend_from_slice(&id_len.to_le_bytes());
        buf.extend_from_slice(id);
        for v in e.joint() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Writes the packed binary format and returns the number of bytes written.
pub fn write_embeddings_binary(
    embeddings: &[JointEmbedding],
    path: &Path,
) -> Result<u64, IngestError> {
    let buf = encode_binary(embeddings)?;
    fs::write(path, &buf).map_err(io_err(path))?;
    Ok(buf.len() as u64)
}

/// Writes embeddings as JSONL using the shortest round-trip float text.
pub fn write_embeddings_jsonl(
    embeddings: &[JointEmbedding],
    path: &Path,
) -> Result<(), IngestError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for e in embeddings {
        let row = EmbeddingRow {
            id: e.id().to_string(),
            image_embed: e.image_part().to_vec(),
            text_embed: e.text_part().to_vec(),
        };
        let line = serde_json::to_string(&row).expect("embedding rows serialize");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], IngestError> {
        if self.bytes.len() - self.pos < n {
            return Err(IngestError::CorruptFile {
                offset: self.pos,
                reason: format!("truncated {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16, IngestError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, IngestError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses the packed binary format.
pub fn decode_binary(bytes: &[u8]) -> Result<Vec<JointEmbedding>, IngestError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != BINARY_MAGIC {
        return Err(IngestError::CorruptFile {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version_at = cur.pos;
    let version = cur.u16("version")?;
    if version != BINARY_VERSION {
        return Err(IngestError::CorruptFile {
            offset: version_at,
            reason: format!("unsupported version {version}"),
        });
    }
    let dv = cur.u32("d_v")? as usize;
    let dt = cur.u32("d_t")? as usize;
    let count = cur.u32("count")? as usize;
    if dv + dt == 0 {
        return Err(IngestError::CorruptFile {
            offset: 6,
            reason: "zero embedding dimension".into(),
        });
    }
    let mut checker = EmbeddingChecker::default();
    for n in 0..count {
        let id_at = cur.pos;
        let id_len = cur.u16("id length")? as usize;
        let id = std::str::from_utf8(cur.take(id_len, "id")?)
            .map_err(|_| IngestError::CorruptFile {
                offset: id_at + 2,
                reason: "id is not UTF-8".into(),
            })?
            .to_string();
        let raw = cur.take(4 * (dv + dt), "vector payload")?;
        let mut values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let image: Vec<f32> = values.by_ref().take(dv).collect();
        let text: Vec<f32> = values.collect();
        checker.push(id, image, text, n + 1)?;
    }
    if cur.pos != bytes.len() {
        return Err(IngestError::CorruptFile {
            offset: cur.pos,
            reason: "trailing bytes after last record".into(),
        });
    }
    Ok(checker.out)
}

/// Validated dataset: records plus the embedding dimensions and per
/// (language, split) counts.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub records: Vec<AnnotationRecord>,
    pub embedding_dim_image: usize,
    pub embedding_dim_text: usize,
    pub counts: BTreeMap<(LanguageTag, Split), usize>,
}

impl DatasetManifest {
    /// Cross-checks embeddings against records: every embedding id must name
    /// a record and all embeddings share one shape.
    pub fn build(
        records: Vec<AnnotationRecord>,
        embeddings: &[JointEmbedding],
    ) -> Result<Self, IngestError> {
        let ids: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
        let (dv, dt) = if embeddings.is_empty() {
            (0, 0)
        } else {
            check_uniform(embeddings)?
        };
        if let Some(e) = embeddings.iter().find(|e| !ids.contains(e.id())) {
            return Err(IngestError::UnknownEmbeddingId(e.id().to_string()));
        }
        let mut counts = BTreeMap::new();
        for r in &records {
            *counts.entry((r.language.clone(), r.split)).or_insert(0) += 1;
        }
        Ok(Self {
            records,
            embedding_dim_image: dv,
            embedding_dim_text: dt,
            counts,
        })
    }

    pub fn languages(&self) -> Vec<LanguageTag> {
        let mut langs: Vec<_> = self.counts.keys().map(|(l, _)| l.clone()).collect();
        langs.dedup();
        langs
    }
}
