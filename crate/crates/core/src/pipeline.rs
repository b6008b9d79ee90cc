//! Stage functions shared by the individual CLI subcommands and the
//! end-to-end `run`. Every stage reads and writes line-oriented files so any
//! step can be inspected or replaced.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backend_io::{
    self, BackendDescriptor, BackendMode, PredictJob, RemoteBackend, RetryPolicy,
    DEFAULT_IN_FLIGHT,
};
use crate::ensemble::{fuse_batch, EnsembleConfig, Prediction};
use crate::error::{Error, Result};
use crate::ingest::{self, AnnotationFormat, DatasetManifest};
use crate::metrics::{self, Average, ScoreRecord, Scores};
use crate::model::{AnnotationRecord, EmotionClass, JointEmbedding, LanguageTag, ProbabilityVector, Split};
use crate::promptgen::{self, PromptArtifact, PromptOptions, PromptVariant};
use crate::retrieval::{self, NormalizeMode, RetrievalIndex, RetrievalOutcome, RetrievalParams};
use crate::tta::{self, TtaPlan, VariantKind};

/// Which split's records are used as queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySplit {
    Train,
    Val,
    #[default]
    Test,
    All,
}

impl QuerySplit {
    pub fn matches(self, split: Split) -> bool {
        match self {
            QuerySplit::Train => split == Split::Train,
            QuerySplit::Val => split == Split::Val,
            QuerySplit::Test => split == Split::Test,
            QuerySplit::All => true,
        }
    }
}

impl FromStr for QuerySplit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(QuerySplit::Train),
            "val" => Ok(QuerySplit::Val),
            "test" => Ok(QuerySplit::Test),
            "all" => Ok(QuerySplit::All),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

pub fn write_jsonl<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(Error::io(path))?);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| Error::Input(e.to_string()))?;
        writeln!(out, "{line}").map_err(Error::io(path))?;
    }
    out.flush().map_err(Error::io(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path).map_err(Error::io(path))?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_annotations(path: &Path, format: Option<AnnotationFormat>) -> Result<Vec<AnnotationRecord>> {
    let format = format.unwrap_or_else(|| AnnotationFormat::from_path(path));
    Ok(ingest::load_annotations(path, format)?)
}

#[derive(Debug, Clone)]
pub struct IngestSummary {
    pub manifest: DatasetManifest,
    pub embeddings: usize,
    pub bytes: u64,
}

/// Validates annotations against embeddings and writes the binary pack.
pub fn ingest_stage(
    annotations: &[AnnotationRecord],
    embeddings: &[JointEmbedding],
    pack_out: &Path,
) -> Result<IngestSummary> {
    let manifest = DatasetManifest::build(annotations.to_vec(), embeddings)?;
    let bytes = ingest::write_embeddings_binary(embeddings, pack_out)?;
    Ok(IngestSummary {
        manifest,
        embeddings: embeddings.len(),
        bytes,
    })
}

/// Pairs each selected record with its embedding, in record order.
pub fn select_queries<'a>(
    records: &'a [AnnotationRecord],
    embeddings: &'a [JointEmbedding],
    split: QuerySplit,
) -> Result<Vec<(&'a AnnotationRecord, &'a JointEmbedding)>> {
    let by_id: HashMap<&str, &JointEmbedding> = embeddings.iter().map(|e| (e.id(), e)).collect();
    records
        .iter()
        .filter(|r| split.matches(r.split))
        .map(|r| {
            by_id
                .get(r.id.as_str())
                .map(|e| (r, *e))
                .ok_or_else(|| retrieval::RetrievalError::MissingEmbedding(r.id.clone()).into())
        })
        .collect()
}

pub fn retrieve_stage(
    index: &RetrievalIndex,
    queries: &[(&AnnotationRecord, &JointEmbedding)],
    params: RetrievalParams,
    exclude_self: bool,
) -> Result<Vec<RetrievalOutcome>> {
    Ok(index.retrieve_batch(queries, params, exclude_self)?)
}

/// Renders one prompt per record. Retrieval outcomes are matched by id and
/// are only required by the `pl` and `ecsp` variants.
pub fn prompt_stage(
    records: &[&AnnotationRecord],
    outcomes: &[RetrievalOutcome],
    variant: PromptVariant,
    options: PromptOptions,
) -> Result<Vec<PromptArtifact>> {
    let by_id: HashMap<&str, &RetrievalOutcome> =
        outcomes.iter().map(|o| (o.query_id.as_str(), o)).collect();
    records
        .iter()
        .map(|r| {
            Ok(promptgen::render(
                variant,
                r,
                by_id.get(r.id.as_str()).copied(),
                options,
            )?)
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct SizeRow {
    sample_id: String,
    width: u32,
    height: u32,
}

/// Reads `{sample_id, width, height}` rows describing source image sizes.
pub fn load_sizes(path: &Path) -> Result<BTreeMap<String, (u32, u32)>> {
    let rows: Vec<SizeRow> = read_jsonl(path)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.sample_id, (r.width, r.height)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtaSettings {
    pub default_source: (u32, u32),
    pub target: (u32, u32),
    pub crop_fraction: f64,
    pub seed: u64,
}

impl Default for TtaSettings {
    fn default() -> Self {
        Self {
            default_source: tta::DEFAULT_TARGET_SIZE,
            target: tta::DEFAULT_TARGET_SIZE,
            crop_fraction: tta::DEFAULT_CROP_FRACTION,
            seed: 0,
        }
    }
}

pub fn tta_stage(
    records: &[&AnnotationRecord],
    sizes: &BTreeMap<String, (u32, u32)>,
    settings: TtaSettings,
) -> Result<Vec<TtaPlan>> {
    records
        .iter()
        .map(|r| {
            let source = sizes.get(&r.id).copied().unwrap_or(settings.default_source);
            Ok(tta::make_plan(
                &r.id,
                source,
                settings.target,
                settings.crop_fraction,
                settings.seed,
            )?)
        })
        .collect()
}

/// Collapses each (sample, backend) group to one vector, then fuses.
///
/// With `tta` on, multi-variant groups are averaged; with it off, only the
/// `identity` row of such groups is used. Single-row groups pass through.
pub fn fuse_stage(
    rows: Vec<ProbabilityVector>,
    config: &EnsembleConfig,
    tta: bool,
) -> Result<Vec<Prediction>> {
    let mut groups: BTreeMap<(String, String), Vec<ProbabilityVector>> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.sample_id.clone(), row.backend_id.clone()))
            .or_default()
            .push(row);
    }
    let mut collapsed = Vec::with_capacity(groups.len());
    for ((sample, backend), mut group) in groups {
        let one = if group.len() == 1 {
            group.pop().expect("non-empty group")
        } else if tta {
            tta::aggregate_tta(&group)?
        } else {
            group
                .into_iter()
                .find(|v| v.variant_id == VariantKind::Identity.as_str())
                .ok_or_else(|| {
                    Error::Input(format!(
                        "no identity row for sample `{sample}` backend `{backend}` with TTA off"
                    ))
                })?
        };
        collapsed.push(one);
    }
    Ok(fuse_batch(collapsed, config)?)
}

/// Equal-weight config over every backend id seen in `rows`.
pub fn equal_config_for(rows: &[ProbabilityVector]) -> Result<EnsembleConfig> {
    let ids: BTreeSet<&str> = rows.iter().map(|r| r.backend_id.as_str()).collect();
    let ids: Vec<&str> = ids.into_iter().collect();
    Ok(EnsembleConfig::equal(&ids)?)
}

/// Per-language score breakdown plus the overall score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBreakdown {
    pub overall: Scores,
    pub by_language: BTreeMap<LanguageTag, Scores>,
}

/// Scores predictions against the gold labels in `records`. Predictions for
/// records without a gold label are skipped; unknown sample ids are errors.
pub fn score_stage(predictions: &[Prediction], records: &[AnnotationRecord]) -> Result<ScoreBreakdown> {
    let by_id: HashMap<&str, &AnnotationRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut all = Vec::with_capacity(predictions.len());
    let mut grouped: BTreeMap<LanguageTag, Vec<(EmotionClass, EmotionClass)>> = BTreeMap::new();
    for p in predictions {
        let record = by_id
            .get(p.sample_id.as_str())
            .ok_or_else(|| Error::Input(format!("prediction for unknown sample `{}`", p.sample_id)))?;
        let Some(gold) = record.gold_emotion else {
            log::debug!("skipping {}: no gold label", p.sample_id);
            continue;
        };
        all.push((gold, p.predicted));
        grouped
            .entry(record.language.clone())
            .or_default()
            .push((gold, p.predicted));
    }
    let overall = metrics::score(&all)?;
    let by_language = grouped
        .into_iter()
        .map(|(lang, pairs)| Ok((lang, metrics::score(&pairs)?)))
        .collect::<Result<_>>()?;
    Ok(ScoreBreakdown {
        overall,
        by_language,
    })
}

/// Table rows for a breakdown, optionally including per-language rows.
pub fn report_rows(method: &str, breakdown: &ScoreBreakdown, by_language: bool) -> Vec<(String, Scores)> {
    let mut rows = vec![(method.to_string(), breakdown.overall)];
    if by_language {
        rows.extend(
            breakdown
                .by_language
                .iter()
                .map(|(lang, s)| (format!("{method} [{lang}]"), *s)),
        );
    }
    rows
}

fn default_eta() -> f64 {
    retrieval::DEFAULT_ETA
}
fn default_k() -> usize {
    retrieval::DEFAULT_K
}
fn default_true() -> bool {
    true
}
fn default_variant() -> PromptVariant {
    PromptVariant::Ecsp
}
fn default_size() -> (u32, u32) {
    tta::DEFAULT_TARGET_SIZE
}
fn default_crop_fraction() -> f64 {
    tta::DEFAULT_CROP_FRACTION
}
fn default_method() -> String {
    "ensemble".to_string()
}
fn default_in_flight() -> usize {
    DEFAULT_IN_FLIGHT
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Settings for an end-to-end run. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub annotations: PathBuf,
    #[serde(default)]
    pub annotation_format: Option<String>,
    pub embeddings: PathBuf,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_variant")]
    pub prompt_variant: PromptVariant,
    #[serde(default)]
    pub duplicate_utterance: bool,
    #[serde(default)]
    pub max_tokens: Option<usize>,
    #[serde(default)]
    pub normalize: NormalizeMode,
    #[serde(default = "default_true")]
    pub exclude_self: bool,
    #[serde(default)]
    pub query_split: QuerySplit,
    #[serde(default = "default_true")]
    pub tta: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_crop_fraction")]
    pub crop_fraction: f64,
    #[serde(default = "default_size")]
    pub target: (u32, u32),
    #[serde(default = "default_size")]
    pub source: (u32, u32),
    #[serde(default)]
    pub sizes: Option<PathBuf>,
    #[serde(default)]
    pub ensemble: Option<PathBuf>,
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default)]
    pub average: Average,
    #[serde(default = "default_in_flight")]
    pub in_flight: usize,
    #[serde(default)]
    pub backends: Vec<BackendDescriptor>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.annotations);
        fix(&mut self.embeddings);
        fix(&mut self.out_dir);
        if let Some(p) = self.sizes.as_mut() {
            fix(p);
        }
        if let Some(p) = self.ensemble.as_mut() {
            fix(p);
        }
        for b in &mut self.backends {
            if b.mode == BackendMode::File && Path::new(&b.location).is_relative() {
                b.location = base.join(&b.location).display().to_string();
            }
        }
    }

    /// Points every backend at one remote server.
    pub fn use_remote(&mut self, url: &str) {
        for b in &mut self.backends {
            b.mode = BackendMode::Remote;
            b.location = url.to_string();
        }
    }

    fn annotation_format(&self) -> Result<Option<AnnotationFormat>> {
        self.annotation_format
            .as_deref()
            .map(AnnotationFormat::from_str)
            .transpose()
            .map_err(Error::Config)
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.eta.is_nan() {
            return Err(Error::Config("eta must be a number".into()));
        }
        if self.backends.is_empty() {
            return Err(Error::Config("no backends configured".into()));
        }
        let mut seen = BTreeSet::new();
        for b in &self.backends {
            if !seen.insert(b.backend_id.as_str()) {
                return Err(Error::Config(format!("duplicate backend id `{}`", b.backend_id)));
            }
            if b.max_tokens == 0 {
                return Err(Error::Config(format!("backend `{}` has max_tokens 0", b.backend_id)));
            }
        }
        Ok(())
    }
}

/// Output file names written by [`run`] inside the output directory.
pub mod outputs {
    pub const EMBEDDINGS: &str = "embeddings.ecsp";
    pub const INDEX_DIR: &str = "index";
    pub const RETRIEVALS: &str = "retrievals.jsonl";
    pub const PROMPTS: &str = "prompts.jsonl";
    pub const TTA_PLANS: &str = "tta_plans.jsonl";
    pub const PROBABILITIES: &str = "probabilities.jsonl";
    pub const PREDICTIONS: &str = "predictions.jsonl";
    pub const SCORES: &str = "scores.json";
    pub const REPORT: &str = "report.txt";
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub queries: usize,
    pub pseudo_labeled: usize,
    pub predictions: usize,
    pub scores: Option<ScoreRecord>,
    pub report: Option<String>,
}

fn backend_rows(
    cfg: &RunConfig,
    queries: &[(&AnnotationRecord, &JointEmbedding)],
    outcomes: &[RetrievalOutcome],
    plans: &[TtaPlan],
) -> Result<Vec<ProbabilityVector>> {
    let query_ids: BTreeSet<&str> = queries.iter().map(|(r, _)| r.id.as_str()).collect();
    let records: Vec<&AnnotationRecord> = queries.iter().map(|(r, _)| *r).collect();
    let mut rows = Vec::new();
    for d in &cfg.backends {
        match d.mode {
            BackendMode::File => {
                for row in backend_io::load_backend_outputs(Path::new(&d.location))? {
                    if row.backend_id != d.backend_id {
                        return Err(Error::Input(format!(
                            "{} holds rows for backend `{}`, expected `{}`",
                            d.location, row.backend_id, d.backend_id
                        )));
                    }
                    if query_ids.contains(row.sample_id.as_str()) {
                        rows.push(row);
                    }
                }
            }
            BackendMode::Remote => {
                let budget = cfg.max_tokens.map_or(d.max_tokens, |m| m.min(d.max_tokens));
                let options = PromptOptions {
                    duplicate_utterance: cfg.duplicate_utterance,
                    max_tokens: Some(budget),
                };
                let prompts = prompt_stage(&records, outcomes, cfg.prompt_variant, options)?;
                let mut jobs = Vec::new();
                for ((record, prompt), plan) in records.iter().zip(prompts).zip(plans) {
                    let image_ref = d.expects_image.then(|| record.image_ref.clone());
                    if d.expects_image && cfg.tta {
                        for v in &plan.variants {
                            jobs.push(PredictJob {
                                prompt: prompt.clone(),
                                variant: Some(v.clone()),
                                image_ref: image_ref.clone(),
                            });
                        }
                    } else {
                        jobs.push(PredictJob {
                            prompt,
                            variant: None,
                            image_ref,
                        });
                    }
                }
                let remote = RemoteBackend::new(d.clone(), RetryPolicy::default())?;
                rows.extend(remote.predict_batch(&jobs, cfg.in_flight)?);
            }
        }
    }
    rows.sort_by(|a, b| {
        (&a.sample_id, &a.backend_id, &a.variant_id).cmp(&(&b.sample_id, &b.backend_id, &b.variant_id))
    });
    Ok(rows)
}

/// Full pipeline: ingest, index, retrieve, prompt, TTA plan, backend
/// outputs, fusion and scoring. All outputs land in `cfg.out_dir`.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(Error::io(out))?;

    let records = read_annotations(&cfg.annotations, cfg.annotation_format()?)?;
    let embeddings = ingest::load_embeddings(&cfg.embeddings)?;
    ingest_stage(&records, &embeddings, &out.join(outputs::EMBEDDINGS))?;

    let pool = retrieval::train_pool(&records, &embeddings)?;
    let index = retrieval::save_index(&out.join(outputs::INDEX_DIR), &pool, cfg.normalize)?;

    let queries = select_queries(&records, &embeddings, cfg.query_split)?;
    let params = RetrievalParams { k: cfg.k, eta: cfg.eta };
    let outcomes = retrieve_stage(&index, &queries, params, cfg.exclude_self)?;
    write_jsonl(&outcomes, &out.join(outputs::RETRIEVALS))?;

    let query_records: Vec<&AnnotationRecord> = queries.iter().map(|(r, _)| *r).collect();
    let options = PromptOptions {
        duplicate_utterance: cfg.duplicate_utterance,
        max_tokens: cfg.max_tokens,
    };
    let prompts = prompt_stage(&query_records, &outcomes, cfg.prompt_variant, options)?;
    write_jsonl(&prompts, &out.join(outputs::PROMPTS))?;

    let sizes = match &cfg.sizes {
        Some(p) => load_sizes(p)?,
        None => BTreeMap::new(),
    };
    let settings = TtaSettings {
        default_source: cfg.source,
        target: cfg.target,
        crop_fraction: cfg.crop_fraction,
        seed: cfg.seed,
    };
    let plans = tta_stage(&query_records, &sizes, settings)?;
    write_jsonl(&plans, &out.join(outputs::TTA_PLANS))?;

    let rows = backend_rows(cfg, &queries, &outcomes, &plans)?;
    backend_io::write_probability_jsonl(&rows, &out.join(outputs::PROBABILITIES))?;

    let ensemble = match &cfg.ensemble {
        Some(p) => EnsembleConfig::load(p)?,
        None => {
            let ids: Vec<&str> = cfg.backends.iter().map(|b| b.backend_id.as_str()).collect();
            EnsembleConfig::equal(&ids)?
        }
    };
    let predictions = fuse_stage(rows, &ensemble, cfg.tta)?;
    write_jsonl(&predictions, &out.join(outputs::PREDICTIONS))?;

    let has_gold = query_records.iter().any(|r| r.gold_emotion.is_some());
    let (scores, report) = if has_gold {
        let breakdown = score_stage(&predictions, &records)?;
        let record = ScoreRecord::new(&cfg.method, &breakdown.overall);
        let json = serde_json::to_string_pretty(&record).map_err(|e| Error::Input(e.to_string()))?;
        fs::write(out.join(outputs::SCORES), json + "\n").map_err(Error::io(out))?;
        let table = metrics::report(&report_rows(&cfg.method, &breakdown, false), cfg.average);
        fs::write(out.join(outputs::REPORT), &table).map_err(Error::io(out))?;
        (Some(record), Some(table))
    } else {
        (None, None)
    };

    Ok(RunSummary {
        out_dir: out.clone(),
        queries: queries.len(),
        pseudo_labeled: outcomes.iter().filter(|o| o.pseudo_label.is_some()).count(),
        predictions: predictions.len(),
        scores,
        report,
    })
}
