use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ecsp_core::ensemble::EnsembleConfig;
use ecsp_core::ingest::{self, AnnotationFormat};
use ecsp_core::metrics::{self, Average, ScoreRecord};
use ecsp_core::pipeline::{self, QuerySplit, RunConfig, TtaSettings};
use ecsp_core::promptgen::{PromptOptions, PromptVariant};
use ecsp_core::retrieval::{self, NormalizeMode, RetrievalOutcome, RetrievalParams};
use ecsp_core::{backend_io, tta, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "ecsp", version, about = "Retrieval-augmented emotion classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate annotations and embeddings, write the packed embedding file.
    Ingest(IngestArgs),
    /// Build the per-language nearest-neighbour index over train records.
    Index(IndexArgs),
    /// Retrieve pseudo-labels for query records.
    Retrieve(RetrieveArgs),
    /// Render classifier prompts.
    Prompt(PromptArgs),
    /// Emit deterministic test-time augmentation plans.
    TtaPlan(TtaPlanArgs),
    /// Fuse backend probability files into predictions.
    Fuse(FuseArgs),
    /// Score predictions against gold labels.
    Score(ScoreArgs),
    /// Run every stage from one config file.
    Run(RunArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Annotation file (JSONL or CSV).
    #[arg(long)]
    annotations: PathBuf,
    /// Override format detection by extension.
    #[arg(long)]
    format: Option<AnnotationFormat>,
}

impl DataArgs {
    fn load(&self) -> Result<Vec<ecsp_core::AnnotationRecord>> {
        pipeline::read_annotations(&self.annotations, self.format)
    }
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Embeddings (JSONL or packed binary).
    #[arg(long)]
    embeddings: PathBuf,
    /// Packed binary output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct IndexArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value = "joint")]
    normalize: NormalizeArg,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum NormalizeArg {
    Joint,
    PerPart,
}

impl From<NormalizeArg> for NormalizeMode {
    fn from(v: NormalizeArg) -> Self {
        match v {
            NormalizeArg::Joint => NormalizeMode::Joint,
            NormalizeArg::PerPart => NormalizeMode::PerPart,
        }
    }
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    embeddings: PathBuf,
    /// Index directory written by `index`.
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value = "test")]
    split: QuerySplit,
    #[arg(long, default_value_t = retrieval::DEFAULT_ETA)]
    eta: f64,
    #[arg(long, default_value_t = retrieval::DEFAULT_K)]
    k: usize,
    /// Let train queries retrieve themselves.
    #[arg(long)]
    no_exclude_self: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PromptArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Retrieval outcomes, needed by `pl` and `ecsp`.
    #[arg(long)]
    retrievals: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: QuerySplit,
    #[arg(long, default_value = "ecsp")]
    variant: PromptVariant,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    duplicate_utterance: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TtaPlanArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "test")]
    split: QuerySplit,
    /// Source image size used when `--sizes` has no entry.
    #[arg(long, default_value = "768x768", value_parser = parse_size)]
    source: (u32, u32),
    /// JSONL rows of `{sample_id, width, height}`.
    #[arg(long)]
    sizes: Option<PathBuf>,
    #[arg(long, default_value = "768x768", value_parser = parse_size)]
    target: (u32, u32),
    #[arg(long, default_value_t = tta::DEFAULT_CROP_FRACTION)]
    crop_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FuseArgs {
    /// Probability JSONL files, one or more.
    #[arg(long, required = true, num_args = 1..)]
    probs: Vec<PathBuf>,
    /// `backend = weight` file; equal weights over all backends if absent.
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// Use only identity rows instead of averaging augmented variants.
    #[arg(long)]
    no_tta: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, default_value = "macro")]
    average: Average,
    #[arg(long)]
    by_language: bool,
    #[arg(long, default_value = "ensemble")]
    method: String,
    /// Also write the score record as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Send every backend's requests to this server instead.
    #[arg(long)]
    remote: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_tta: bool,
}

fn parse_size(s: &str) -> std::result::Result<(u32, u32), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let w = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    let h = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    Ok((w, h))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("serializable summary"));
}

#[derive(Serialize)]
struct IngestReport {
    records: usize,
    embeddings: usize,
    bytes: u64,
    languages: Vec<String>,
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let records = a.data.load()?;
    let embeddings = ingest::load_embeddings(&a.embeddings)?;
    let summary = pipeline::ingest_stage(&records, &embeddings, &a.out)?;
    print_json(&IngestReport {
        records: summary.manifest.records.len(),
        embeddings: summary.embeddings,
        bytes: summary.bytes,
        languages: summary
            .manifest
            .languages()
            .iter()
            .map(|l| l.as_str().to_string())
            .collect(),
    });
    Ok(())
}

fn cmd_index(a: IndexArgs) -> Result<()> {
    let records = a.data.load()?;
    let embeddings = ingest::load_embeddings(&a.embeddings)?;
    let pool = retrieval::train_pool(&records, &embeddings)?;
    let index = retrieval::save_index(&a.out, &pool, a.normalize.into())?;
    let sizes: BTreeMap<&str, usize> = index
        .languages()
        .map(|l| (l.language().as_str(), l.len()))
        .collect();
    print_json(&serde_json::json!({ "pool": pool.len(), "languages": sizes }));
    Ok(())
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<()> {
    let records = a.data.load()?;
    let embeddings = ingest::load_embeddings(&a.embeddings)?;
    let index = retrieval::load_index(&a.index)?;
    let queries = pipeline::select_queries(&records, &embeddings, a.split)?;
    let params = RetrievalParams { k: a.k, eta: a.eta };
    let outcomes = pipeline::retrieve_stage(&index, &queries, params, !a.no_exclude_self)?;
    pipeline::write_jsonl(&outcomes, &a.out)?;
    let labeled = outcomes.iter().filter(|o| o.pseudo_label.is_some()).count();
    print_json(&serde_json::json!({ "queries": outcomes.len(), "pseudo_labeled": labeled }));
    Ok(())
}

fn cmd_prompt(a: PromptArgs) -> Result<()> {
    let records = a.data.load()?;
    let outcomes: Vec<RetrievalOutcome> = match &a.retrievals {
        Some(p) => pipeline::read_jsonl(p)?,
        None => Vec::new(),
    };
    let selected: Vec<_> = records.iter().filter(|r| a.split.matches(r.split)).collect();
    let options = PromptOptions {
        duplicate_utterance: a.duplicate_utterance,
        max_tokens: a.max_tokens,
    };
    let prompts = pipeline::prompt_stage(&selected, &outcomes, a.variant, options)?;
    pipeline::write_jsonl(&prompts, &a.out)?;
    let truncated = prompts.iter().filter(|p| p.truncated).count();
    print_json(&serde_json::json!({ "prompts": prompts.len(), "truncated": truncated }));
    Ok(())
}

fn cmd_tta_plan(a: TtaPlanArgs) -> Result<()> {
    let records = a.data.load()?;
    let selected: Vec<_> = records.iter().filter(|r| a.split.matches(r.split)).collect();
    let sizes = match &a.sizes {
        Some(p) => pipeline::load_sizes(p)?,
        None => BTreeMap::new(),
    };
    let settings = TtaSettings {
        default_source: a.source,
        target: a.target,
        crop_fraction: a.crop_fraction,
        seed: a.seed,
    };
    let plans = pipeline::tta_stage(&selected, &sizes, settings)?;
    pipeline::write_jsonl(&plans, &a.out)?;
    print_json(&serde_json::json!({ "plans": plans.len() }));
    Ok(())
}

fn cmd_fuse(a: FuseArgs) -> Result<()> {
    let mut rows = Vec::new();
    for p in &a.probs {
        rows.extend(backend_io::load_backend_outputs(p)?);
    }
    let config = match &a.ensemble {
        Some(p) => EnsembleConfig::load(p)?,
        None => pipeline::equal_config_for(&rows)?,
    };
    let predictions = pipeline::fuse_stage(rows, &config, !a.no_tta)?;
    pipeline::write_jsonl(&predictions, &a.out)?;
    print_json(&serde_json::json!({ "predictions": predictions.len() }));
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let records = a.data.load()?;
    let predictions = pipeline::read_jsonl(&a.predictions)?;
    let breakdown = pipeline::score_stage(&predictions, &records)?;
    if let Some(out) = &a.out {
        write_score_record(out, &ScoreRecord::new(&a.method, &breakdown.overall))?;
    }
    let rows = pipeline::report_rows(&a.method, &breakdown, a.by_language);
    print!("{}", metrics::report(&rows, a.average));
    Ok(())
}

fn write_score_record(path: &Path, record: &ScoreRecord) -> Result<()> {
    let json = serde_json::to_string_pretty(record).map_err(|e| Error::Input(e.to_string()))?;
    std::fs::write(path, json + "\n").map_err(Error::io(path))
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(dir) = a.out_dir {
        cfg.out_dir = dir;
    }
    if let Some(url) = &a.remote {
        cfg.use_remote(url);
    }
    if let Some(eta) = a.eta {
        cfg.eta = eta;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if a.no_tta {
        cfg.tta = false;
    }
    let summary = pipeline::run(&cfg)?;
    log::info!(
        "{} queries, {} pseudo-labeled, {} predictions in {}",
        summary.queries,
        summary.pseudo_labeled,
        summary.predictions,
        summary.out_dir.display()
    );
    if let Some(report) = summary.report {
        print!("{report}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ECSP_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Index(a) => cmd_index(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Prompt(a) => cmd_prompt(a),
        Command::TtaPlan(a) => cmd_tta_plan(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Score(a) => cmd_score(a),
        Command::Run(a) => cmd_run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.code(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
