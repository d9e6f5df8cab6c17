//! FITB accuracy evaluation through the full pipeline and the training-data
//! ratio sweep.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{Catalog, Item, SplitMode};
use crate::embedstore::{EmbeddingProvider, VectorIndex};
use crate::inference::{
    assemble_prompt, parse_answer, ChatBackend, ParseConfidence, PromptBundle, PromptConfig,
    PromptInput, Task,
};
use crate::qagen::{export_finetune_jsonl, FITBQuestion, TrainingRecord};
use crate::retrieval::{retrieve, PlannerSettings, QueryContext};

/// Reported FITB accuracy (%) on Polyvore Outfits-D (disjoint) and Polyvore
/// Outfits (joint). Kept for report annotation only.
pub const REFERENCE_FITB_ACCURACY: [(&str, f64, f64); 5] = [
    ("Type-Aware", 55.65, 57.83),
    ("SCE-Net Average", 53.67, 59.07),
    ("CSA-Net", 59.26, 63.73),
    ("OutfitTransformer", 59.48, 67.10),
    ("FashionLLM", 62.17, 67.21),
];

pub const DEFAULT_RATIO_GRID: [f64; 6] = [0.01, 0.05, 0.1, 0.25, 0.5, 1.0];

/// Absorbs representation error in `ratio * total` (0.29 * 100 = 28.999…).
const RATIO_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no questions to evaluate")]
    NoQuestions,
    #[error("retrieval is enabled but no index/embedder was supplied")]
    MissingIndex,
    #[error("invalid ratio grid: {0}")]
    InvalidRatios(String),
    #[error("unknown report format '{0}' (expected json or csv)")]
    UnknownFormat(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("malformed report {path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

fn io_error(path: &Path, e: impl fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSettings {
    pub k_per_path: usize,
    pub k_final: usize,
    /// LLM-generated question paths per query; 0 disables them.
    pub n_questions: usize,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        RetrievalSettings {
            k_per_path: 10,
            k_final: 5,
            n_questions: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dataset: SplitMode,
    pub model: String,
    pub max_tokens: u32,
    pub prompts: PromptConfig,
    /// `None` evaluates without retrieved context.
    pub retrieval: Option<RetrievalSettings>,
    pub concurrency: usize,
    /// Seeds that produced the inputs (question generation, backend, ...),
    /// recorded in the fingerprint.
    pub seeds: BTreeMap<String, u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: SplitMode::Disjoint,
            model: "fashion-llm".into(),
            max_tokens: 16,
            prompts: PromptConfig::default(),
            retrieval: None,
            concurrency: 8,
            seeds: BTreeMap::new(),
        }
    }
}

/// Borrowed runtime pieces of the pipeline.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub catalog: &'a Catalog,
    pub backend: &'a dyn ChatBackend,
    pub index: Option<&'a VectorIndex>,
    pub embedder: Option<&'a dyn EmbeddingProvider>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLogEntry {
    pub qid: String,
    pub predicted: Option<usize>,
    pub truth: usize,
    pub parse_confidence: ParseConfidence,
    pub correct: bool,
    /// Wall-clock time of the backend call; the only non-deterministic field.
    pub latency_ms: u64,
    pub context_docs: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceAccuracy {
    pub method: String,
    pub disjoint: f64,
    pub joint: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: SplitMode,
    pub retrieval_enabled: bool,
    pub backend: String,
    pub n_questions: usize,
    pub n_correct: usize,
    pub n_parse_failed: usize,
    pub n_backend_errors: usize,
    /// Parse failures and backend errors count as incorrect.
    pub accuracy: f64,
    /// Set when any question hit a backend error.
    pub incomplete: bool,
    pub config_fingerprint: String,
    pub config: serde_json::Value,
    pub reference: Vec<ReferenceAccuracy>,
    /// Sorted by qid.
    pub entries: Vec<EvalLogEntry>,
}

impl EvalReport {
    /// Copy with latencies zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for e in &mut r.entries {
            e.latency_ms = 0;
        }
        r
    }

    /// Accuracy recomputed from the per-question log.
    pub fn recomputed_accuracy(&self) -> f64 {
        accuracy_of(&self.entries)
    }
}

fn accuracy_of(entries: &[EvalLogEntry]) -> f64 {
    if entries.is_empty() {
        return 0.0;
    }
    entries.iter().filter(|e| e.correct).count() as f64 / entries.len() as f64
}

fn lookup(catalog: &Catalog, ids: &[String]) -> Result<Vec<Item>, String> {
    ids.iter()
        .map(|id| {
            catalog
                .item(id)
                .cloned()
                .ok_or_else(|| format!("unknown item {id}"))
        })
        .collect()
}

/// The prompt sent for `q`. With retrieval enabled, the context items form the
/// query and the fused documents become the context block; a retrieval
/// failure falls back to an empty context.
pub fn fitb_bundle(
    q: &FITBQuestion,
    pipeline: &Pipeline<'_>,
    config: &PipelineConfig,
) -> Result<PromptBundle, String> {
    let items = lookup(pipeline.catalog, &q.context_item_ids)?;
    let candidates = lookup(pipeline.catalog, &q.candidates)?;
    let mut context = Vec::new();
    if let Some(r) = &config.retrieval {
        let (Some(index), Some(embedder)) = (pipeline.index, pipeline.embedder) else {
            return Err(EvalError::MissingIndex.to_string());
        };
        let ctx = QueryContext {
            query_items: q.context_item_ids.clone(),
            free_text: None,
            style: None,
            occasion: None,
            k_per_path: r.k_per_path,
            k_final: r.k_final,
        };
        let llm = (r.n_questions > 0).then_some(pipeline.backend);
        let settings = PlannerSettings {
            model: config.model.clone(),
            ..Default::default()
        };
        match retrieve(&ctx, pipeline.catalog, index, embedder, llm, r.n_questions, &settings) {
            Ok(retrieved) => context = retrieved.context_docs(index),
            Err(e) => log::warn!("{}: retrieval failed, answering without context: {e}", q.qid),
        }
    }
    assemble_prompt(
        Task::Fitb,
        &PromptInput {
            items: &items,
            candidates: Some(&candidates),
            context: &context,
            ..Default::default()
        },
        &config.prompts,
    )
    .map_err(|e| e.to_string())
}

fn evaluate_one(q: &FITBQuestion, pipeline: &Pipeline<'_>, config: &PipelineConfig) -> EvalLogEntry {
    let mut entry = EvalLogEntry {
        qid: q.qid.clone(),
        predicted: None,
        truth: q.answer_index,
        parse_confidence: ParseConfidence::Failed,
        correct: false,
        latency_ms: 0,
        context_docs: 0,
        error: None,
    };
    let bundle = match fitb_bundle(q, pipeline, config) {
        Ok(b) => b,
        Err(e) => {
            entry.error = Some(e);
            return entry;
        }
    };
    entry.context_docs = bundle.context_doc_ids.len();
    let request = bundle.to_request(&config.model, config.max_tokens);
    let started = Instant::now();
    let response = pipeline.backend.chat(&request);
    entry.latency_ms = started.elapsed().as_millis() as u64;
    match response {
        Ok(resp) => {
            let parsed = parse_answer(Task::Fitb, &resp.text);
            entry.predicted = parsed.choice_index;
            entry.parse_confidence = parsed.confidence;
            entry.correct = parsed.choice_index == Some(q.answer_index);
        }
        Err(e) => entry.error = Some(e.to_string()),
    }
    entry
}

fn questions_digest(questions: &[FITBQuestion]) -> String {
    let mut h = Sha256::new();
    for q in questions {
        h.update(serde_json::to_vec(q).expect("question serializes"));
    }
    hex::encode(h.finalize())
}

fn fingerprint(
    questions: &[FITBQuestion],
    backend: &str,
    config: &PipelineConfig,
) -> (String, serde_json::Value) {
    let value = serde_json::json!({
        "dataset": config.dataset,
        "backend": backend,
        "model": config.model,
        "max_tokens": config.max_tokens,
        "char_budget": config.prompts.char_budget,
        "templates": config.prompts.templates,
        "retrieval": config.retrieval,
        "seeds": config.seeds,
        "n_questions": questions.len(),
        "questions_sha256": questions_digest(questions),
    });
    let digest = Sha256::digest(serde_json::to_vec(&value).expect("fingerprint serializes"));
    (hex::encode(digest), value)
}

/// Answers every question through prompt assembly (with retrieval when
/// configured), the chat backend and the answer parser, and scores the
/// predictions. Questions run concurrently up to `config.concurrency`.
pub fn run_fitb_eval(
    questions: &[FITBQuestion],
    pipeline: &Pipeline<'_>,
    config: &PipelineConfig,
) -> Result<EvalReport, EvalError> {
    if questions.is_empty() {
        return Err(EvalError::NoQuestions);
    }
    if config.retrieval.is_some() && (pipeline.index.is_none() || pipeline.embedder.is_none()) {
        return Err(EvalError::MissingIndex);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency.max(1))
        .build()
        .expect("thread pool");
    let mut entries: Vec<EvalLogEntry> = pool.install(|| {
        questions
            .par_iter()
            .map(|q| evaluate_one(q, pipeline, config))
            .collect()
    });
    entries.sort_by(|a, b| a.qid.cmp(&b.qid));

    let n_correct = entries.iter().filter(|e| e.correct).count();
    let n_backend_errors = entries.iter().filter(|e| e.error.is_some()).count();
    let n_parse_failed = entries
        .iter()
        .filter(|e| e.error.is_none() && e.parse_confidence == ParseConfidence::Failed)
        .count();
    let backend = pipeline.backend.kind().to_string();
    let (config_fingerprint, config_value) = fingerprint(questions, &backend, config);
    if n_backend_errors > 0 {
        log::warn!("{n_backend_errors} question(s) failed; report is incomplete");
    }
    Ok(EvalReport {
        dataset: config.dataset,
        retrieval_enabled: config.retrieval.is_some(),
        backend,
        n_questions: entries.len(),
        n_correct,
        n_parse_failed,
        n_backend_errors,
        accuracy: accuracy_of(&entries),
        incomplete: n_backend_errors > 0,
        config_fingerprint,
        config: config_value,
        reference: REFERENCE_FITB_ACCURACY
            .iter()
            .map(|&(method, disjoint, joint)| ReferenceAccuracy {
                method: method.into(),
                disjoint,
                joint,
            })
            .collect(),
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(EvalError::UnknownFormat(other.into())),
        }
    }
}

/// JSON carries the whole report; CSV carries the per-question log.
pub fn export_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<(), EvalError> {
    match format {
        ReportFormat::Json => {
            let text = serde_json::to_string_pretty(report).expect("report serializes");
            std::fs::write(path, text).map_err(|e| io_error(path, e))
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
            for entry in &report.entries {
                w.serialize(entry).map_err(|e| io_error(path, e))?;
            }
            w.flush().map_err(|e| io_error(path, e))
        }
    }
}

pub fn load_report_json(path: &Path) -> Result<EvalReport, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| EvalError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_report_csv(path: &Path) -> Result<Vec<EvalLogEntry>, EvalError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_error(path, e))?;
    r.deserialize()
        .collect::<Result<Vec<EvalLogEntry>, _>>()
        .map_err(|e| EvalError::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// `floor(ratio × total)`.
pub fn subsample_count(ratio: f64, total: usize) -> usize {
    ((ratio * total as f64) + RATIO_EPS).floor() as usize
}

/// Selects `subsample_count(ratio, n)` records: the prefix of one seeded
/// permutation, so smaller ratios are subsets of larger ones. Selected records
/// keep their input order.
pub fn subsample_records(records: &[TrainingRecord], ratio: f64, seed: u64) -> Vec<TrainingRecord> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut keep = order[..subsample_count(ratio, records.len())].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| records[i].clone()).collect()
}

pub fn validate_ratios(ratios: &[f64]) -> Result<(), EvalError> {
    if ratios.is_empty() {
        return Err(EvalError::InvalidRatios("empty grid".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(EvalError::InvalidRatios(format!("{r} is outside (0, 1]")));
    }
    if ratios.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::InvalidRatios("ratios must be strictly increasing".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HookOutcome {
    /// Keep evaluating with the configured backend.
    UseConfigured,
    /// Evaluate against a chat endpoint at this base URL.
    Endpoint(String),
}

/// Boundary through which external fine-tuning plugs into the ratio sweep.
pub trait TrainerHook: Send + Sync {
    fn train(&self, train_jsonl: &Path, ratio: f64) -> Result<HookOutcome, String>;
}

pub struct NoopHook;

impl TrainerHook for NoopHook {
    fn train(&self, _train_jsonl: &Path, _ratio: f64) -> Result<HookOutcome, String> {
        Ok(HookOutcome::UseConfigured)
    }
}

/// Runs `program args... <train.jsonl>`; on success the trimmed stdout must be
/// the base URL of the trained model's chat endpoint.
#[derive(Debug, Clone)]
pub struct CommandHook {
    pub program: String,
    pub args: Vec<String>,
}

impl TrainerHook for CommandHook {
    fn train(&self, train_jsonl: &Path, ratio: f64) -> Result<HookOutcome, String> {
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(train_jsonl)
            .env("FLLM_TRAIN_RATIO", ratio.to_string())
            .output()
            .map_err(|e| format!("cannot run {}: {e}", self.program))?;
        if !out.status.success() {
            return Err(format!(
                "{} exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            ));
        }
        let url = String::from_utf8_lossy(&out.stdout).trim().to_string();
        if url.is_empty() {
            return Err(format!("{} printed no endpoint URL", self.program));
        }
        Ok(HookOutcome::Endpoint(url))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub ratio: f64,
    pub n_train_records: usize,
    pub accuracy: Option<f64>,
    pub seed: u64,
    pub status: PointStatus,
    pub error: Option<String>,
    pub report: Option<EvalReport>,
}

/// Builds a backend for an endpoint returned by a trainer hook.
pub type BackendFactory<'a> = dyn Fn(&str) -> Box<dyn ChatBackend> + Sync + 'a;

pub struct RatioSeries<'a> {
    pub ratios: &'a [f64],
    pub records: &'a [TrainingRecord],
    pub seed: u64,
    pub questions: &'a [FITBQuestion],
    pub hook: &'a dyn TrainerHook,
    /// Where subsampled training files are written.
    pub work_dir: &'a Path,
    pub backend_factory: &'a BackendFactory<'a>,
}

/// For each ratio: subsample the training records, hand them to the trainer
/// hook, and evaluate the fixed question set. A failing hook marks its point
/// failed and the series continues.
pub fn run_ratio_series(
    series: &RatioSeries<'_>,
    pipeline: &Pipeline<'_>,
    config: &PipelineConfig,
) -> Result<Vec<RatioPoint>, EvalError> {
    validate_ratios(series.ratios)?;
    if series.questions.is_empty() {
        return Err(EvalError::NoQuestions);
    }
    std::fs::create_dir_all(series.work_dir).map_err(|e| io_error(series.work_dir, e))?;
    let mut points = Vec::with_capacity(series.ratios.len());
    for &ratio in series.ratios {
        let sample = subsample_records(series.records, ratio, series.seed);
        let mut point = RatioPoint {
            ratio,
            n_train_records: sample.len(),
            accuracy: None,
            seed: series.seed,
            status: PointStatus::Failed,
            error: None,
            report: None,
        };
        let path = series.work_dir.join(format!("train_ratio_{ratio}.jsonl"));
        if let Err(e) = export_finetune_jsonl(&sample, &path) {
            point.error = Some(e.to_string());
            points.push(point);
            continue;
        }
        let outcome = match series.hook.train(&path, ratio) {
            Ok(o) => o,
            Err(e) => {
                log::warn!("trainer hook failed at ratio {ratio}: {e}");
                point.error = Some(e);
                points.push(point);
                continue;
            }
        };
        let trained;
        let mut run = *pipeline;
        if let HookOutcome::Endpoint(url) = &outcome {
            trained = (series.backend_factory)(url);
            run.backend = trained.as_ref();
        }
        match run_fitb_eval(series.questions, &run, config) {
            Ok(report) => {
                point.accuracy = Some(report.accuracy);
                point.status = PointStatus::Ok;
                point.report = Some(report);
            }
            Err(e) => point.error = Some(e.to_string()),
        }
        points.push(point);
    }
    Ok(points)
}

/// Curve CSV with columns `ratio,n_train,accuracy,seed`; failed points leave
/// accuracy empty.
pub fn write_curve_csv(points: &[RatioPoint], path: &Path) -> Result<(), EvalError> {
    let mut f = File::create(path).map_err(|e| io_error(path, e))?;
    let mut text = String::from("ratio,n_train,accuracy,seed\n");
    for p in points {
        let acc = p.accuracy.map(|a| a.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{},{},{}\n", p.ratio, p.n_train_records, acc, p.seed));
    }
    f.write_all(text.as_bytes()).map_err(|e| io_error(path, e))
}
