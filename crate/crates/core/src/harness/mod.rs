//! End-to-end evaluation: prompt, query a backend, parse, validate, convert
//! under a policy and score. Every raw response and intermediate record is
//! written as line-delimited JSON so a run can be audited and resumed.

pub mod client;
pub mod mock;
pub mod stub;

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{CategoryVocab, ImageAnnotation, RefExpression};
use crate::geometry::BBox;
use crate::metrics::{evaluate_detections, rec_accuracy, EvalReport};
use crate::parser::{parse_cot_answer, to_detections, validate, ConsistencyReport, Detection, ParseWarning, Policy};
use crate::prompt::{eval_spec, labeled_instances, refexp_spec, render_prompt, PromptSpec, Setting};

pub use client::{ChatClient, ClientConfig, ClientError};
pub use mock::{mock_generate, mock_generate_traced, FaultProfile, FaultTally};

pub const DEFAULT_MAX_TOKENS: u32 = 8192;
pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_CHUNK: usize = 64;
/// A run aborts when more than this fraction of queries fail.
pub const ABORT_FRACTION: f64 = 0.5;

pub const RAW_FILE: &str = "raw_responses.jsonl";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("prompt text is empty")]
    EmptyPrompt,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Ledger { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{failed} of {total} queries failed; partial results written")]
    Aborted { failed: usize, total: usize, report: Box<EvalReport> },
    #[error("cannot start worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRequest {
    /// Path or URL; pixels are never decoded here.
    pub image: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl InferenceRequest {
    pub fn new(image: impl Into<String>, prompt: impl Into<String>) -> Result<Self, HarnessError> {
        let prompt = prompt.into();
        if prompt.trim().is_empty() {
            return Err(HarnessError::EmptyPrompt);
        }
        Ok(InferenceRequest {
            image: image.into(),
            prompt,
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
        })
    }
}

/// Everything a backend may look at for one query. `truth` is only for the
/// mock; real backends see the image reference and prompt.
pub struct Query<'a> {
    pub image_id: i64,
    pub image: String,
    pub width: f64,
    pub height: f64,
    pub spec: &'a PromptSpec,
    pub prompt: &'a str,
    pub truth: &'a [(String, BBox)],
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("no stored prediction for image {0}")]
    MissingPrediction(i64),
    #[error("{0}")]
    Request(String),
}

pub trait Backend: Sync {
    fn name(&self) -> &str;
    fn generate(&self, q: &Query<'_>) -> Result<String, BackendError>;
}

pub struct MockBackend {
    pub profile: FaultProfile,
    pub cot: bool,
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn generate(&self, q: &Query<'_>) -> Result<String, BackendError> {
        Ok(mock::mock_from_labeled(q.image_id, q.truth, q.width, q.height, q.spec, &self.profile, self.cot).0)
    }
}

pub struct EndpointBackend {
    pub client: ChatClient,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Backend for EndpointBackend {
    fn name(&self) -> &str {
        "endpoint"
    }

    fn generate(&self, q: &Query<'_>) -> Result<String, BackendError> {
        let mut req = InferenceRequest::new(q.image.clone(), q.prompt).map_err(|e| BackendError::Request(e.to_string()))?;
        req.max_tokens = self.max_tokens;
        req.temperature = self.temperature;
        Ok(self.client.complete(&req)?)
    }
}

/// Stored model outputs, one `{"image_id", "response"}` object per line.
pub struct PredictionsBackend {
    responses: HashMap<i64, String>,
}

#[derive(Deserialize)]
struct StoredPrediction {
    image_id: i64,
    #[serde(alias = "text", alias = "answer")]
    response: String,
}

impl PredictionsBackend {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let mut responses = HashMap::new();
        for (_, value) in read_jsonl::<StoredPrediction>(path)? {
            responses.insert(value.image_id, value.response);
        }
        Ok(PredictionsBackend { responses })
    }

    pub fn from_map(responses: HashMap<i64, String>) -> Self {
        PredictionsBackend { responses }
    }
}

impl Backend for PredictionsBackend {
    fn name(&self) -> &str {
        "predictions"
    }

    fn generate(&self, q: &Query<'_>) -> Result<String, BackendError> {
        self.responses
            .get(&q.image_id)
            .cloned()
            .ok_or(BackendError::MissingPrediction(q.image_id))
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub setting: Setting,
    pub policy: Policy,
    pub dup_iou: f64,
    /// Where artifacts go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    pub jobs: usize,
    pub chunk: usize,
    /// Prefix joined to annotation file names to form image references.
    pub image_root: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            setting: Setting::FullCategory,
            policy: Policy::Repair,
            dup_iou: crate::parser::DEFAULT_DUP_IOU,
            out_dir: None,
            jobs: 1,
            chunk: DEFAULT_CHUNK,
            image_root: None,
        }
    }
}

/// Ledger key: an image, or one expression on an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Key {
    pub image_id: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    #[serde(flatten)]
    pub key: Key,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    #[serde(flatten)]
    pub key: Key,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    #[serde(flatten)]
    pub key: Key,
    pub detections: Vec<Detection>,
    pub warnings: Vec<ParseWarning>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency: Option<ConsistencyReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub report: EvalReport,
    pub records: Vec<DetectionRecord>,
    pub failures: Vec<FailureRecord>,
    /// Smallest and largest prompt category-list length.
    pub prompt_categories: Option<(usize, usize)>,
    /// Queries answered from an existing raw-response ledger.
    pub resumed: usize,
}

struct Job {
    key: Key,
    image: String,
    width: f64,
    height: f64,
    spec: PromptSpec,
    truth: Vec<(String, BBox)>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>, HarnessError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| HarnessError::Ledger {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("record serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn image_ref(root: &Option<PathBuf>, file_name: Option<&str>, image_id: i64) -> String {
    let name = file_name.map(str::to_string).unwrap_or_else(|| format!("{image_id}.jpg"));
    match root {
        Some(r) => r.join(name).display().to_string(),
        None => name,
    }
}

/// Previously persisted raw responses in file order, and whether the last
/// line was a partially written append (which is discarded).
fn load_ledger(path: &Path) -> Result<(Vec<RawRecord>, bool), HarnessError> {
    if !path.exists() {
        return Ok((Vec::new(), false));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawRecord>(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => {
                log::warn!("{}: ignoring truncated final line", path.display());
                return Ok((out, true));
            }
            Err(source) => {
                return Err(HarnessError::Ledger {
                    path: path.to_path_buf(),
                    line: i + 1,
                    source,
                })
            }
        }
    }
    Ok((out, false))
}

fn append_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), HarnessError> {
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        writeln!(w, "{}", serde_json::to_string(item).expect("record serializes")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

enum Origin {
    Stored,
    Fresh,
    Skipped,
}

struct Collected {
    raws: Vec<Option<RawRecord>>,
    failures: Vec<FailureRecord>,
    resumed: usize,
}

/// Query every job, reusing ledger entries whose prompt is unchanged and
/// appending new responses chunk by chunk so an interrupted run loses at
/// most one chunk.
fn collect(jobs: &[Job], backend: &dyn Backend, opts: &EvalOptions) -> Result<Collected, HarnessError> {
    let ledger_path = opts.out_dir.as_ref().map(|d| d.join(RAW_FILE));
    let mut done: HashMap<Key, RawRecord> = HashMap::new();
    if let Some(p) = &ledger_path {
        let (stored, truncated) = load_ledger(p)?;
        if truncated {
            write_jsonl(p, &stored)?;
        }
        // Later lines supersede earlier ones for the same key.
        done.extend(stored.into_iter().map(|r| (r.key, r)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;

    let mut raws: Vec<Option<RawRecord>> = Vec::with_capacity(jobs.len());
    let mut failures = Vec::new();
    let mut resumed = 0;
    for chunk in jobs.chunks(opts.chunk.max(1)) {
        let results: Vec<Result<(RawRecord, Origin), FailureRecord>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|job| {
                    let fail = |error: String| FailureRecord { key: job.key, error };
                    if job.spec.categories.is_empty() {
                        // Nothing to ask about (ground-truth setting, empty image).
                        let rec = RawRecord {
                            key: job.key,
                            prompt: String::new(),
                            response: String::new(),
                        };
                        return Ok((rec, Origin::Skipped));
                    }
                    let prompt = render_prompt(&job.spec).map_err(|e| fail(e.to_string()))?;
                    if let Some(r) = done.get(&job.key).filter(|r| r.prompt == prompt) {
                        return Ok((r.clone(), Origin::Stored));
                    }
                    let q = Query {
                        image_id: job.key.image_id,
                        image: job.image.clone(),
                        width: job.width,
                        height: job.height,
                        spec: &job.spec,
                        prompt: &prompt,
                        truth: &job.truth,
                    };
                    let response = backend.generate(&q).map_err(|e| fail(e.to_string()))?;
                    Ok((RawRecord { key: job.key, prompt, response }, Origin::Fresh))
                })
                .collect()
        });
        let mut fresh = Vec::new();
        for r in results {
            match r {
                Ok((rec, origin)) => {
                    match origin {
                        Origin::Stored => resumed += 1,
                        Origin::Fresh => fresh.push(rec.clone()),
                        Origin::Skipped => {}
                    }
                    raws.push(Some(rec));
                }
                Err(f) => {
                    log::warn!("image {}: {}", f.key.image_id, f.error);
                    failures.push(f);
                    raws.push(None);
                }
            }
        }
        if let Some(p) = &ledger_path {
            append_jsonl(p, &fresh)?;
        }
    }
    Ok(Collected { raws, failures, resumed })
}

fn convert(job: &Job, raw: &RawRecord, opts: &EvalOptions) -> DetectionRecord {
    if raw.prompt.is_empty() {
        return DetectionRecord {
            key: job.key,
            detections: Vec::new(),
            warnings: Vec::new(),
            parse_error: None,
            consistency: None,
        };
    }
    match parse_cot_answer(&raw.response) {
        Ok(ans) => {
            let report = validate(&ans, &job.spec, job.width, job.height, opts.dup_iou);
            DetectionRecord {
                key: job.key,
                detections: to_detections(&ans, &report, opts.policy),
                warnings: ans.warnings,
                parse_error: None,
                consistency: Some(report),
            }
        }
        Err(e) => DetectionRecord {
            key: job.key,
            detections: Vec::new(),
            warnings: Vec::new(),
            parse_error: Some(e.to_string()),
            consistency: None,
        },
    }
}

fn persist(opts: &EvalOptions, run: &EvalRun) -> Result<(), HarnessError> {
    let Some(dir) = &opts.out_dir else { return Ok(()) };
    write_jsonl(&dir.join(DETECTIONS_FILE), &run.records)?;
    write_jsonl(&dir.join(FAILURES_FILE), &run.failures)?;
    let json_path = dir.join(REPORT_JSON);
    let json = serde_json::to_string_pretty(&run.report).expect("report serializes");
    fs::write(&json_path, json + "\n").map_err(io_err(&json_path))?;
    let txt_path = dir.join(REPORT_TXT);
    fs::write(&txt_path, run.report.table()).map_err(io_err(&txt_path))
}

fn prepare_dir(opts: &EvalOptions) -> Result<(), HarnessError> {
    if let Some(d) = &opts.out_dir {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    Ok(())
}

fn category_range(jobs: &[Job]) -> Option<(usize, usize)> {
    let lens = jobs.iter().map(|j| j.spec.categories.len());
    Some((lens.clone().min()?, lens.max()?))
}

fn finish(opts: &EvalOptions, run: EvalRun, total: usize) -> Result<EvalRun, HarnessError> {
    persist(opts, &run)?;
    let failed = run.failures.len();
    if total > 0 && failed as f64 > ABORT_FRACTION * total as f64 {
        return Err(HarnessError::Aborted {
            failed,
            total,
            report: Box::new(run.report),
        });
    }
    Ok(run)
}

/// Detection evaluation over `anns` under `opts.setting`. Failed images are
/// excluded from scoring and listed in the failure ledger.
pub fn run_eval(
    anns: &[ImageAnnotation],
    vocab: &CategoryVocab,
    backend: &dyn Backend,
    opts: &EvalOptions,
) -> Result<EvalRun, HarnessError> {
    prepare_dir(opts)?;
    let jobs: Vec<Job> = anns
        .iter()
        .map(|a| Job {
            key: Key {
                image_id: a.image_id,
                expression: None,
            },
            image: image_ref(&opts.image_root, a.file_name.as_deref(), a.image_id),
            width: a.width,
            height: a.height,
            spec: eval_spec(a, vocab, opts.setting),
            truth: labeled_instances(a, vocab),
        })
        .collect();
    let collected = collect(&jobs, backend, opts)?;

    let mut scored_anns = Vec::new();
    let mut scored_dets = Vec::new();
    let mut records = Vec::new();
    for ((job, ann), raw) in jobs.iter().zip(anns).zip(&collected.raws) {
        let Some(raw) = raw else { continue };
        let rec = convert(job, raw, opts);
        scored_anns.push(ann.clone());
        scored_dets.push(rec.detections.clone());
        records.push(rec);
    }
    let mut report = evaluate_detections(&scored_anns, &scored_dets, vocab, opts.setting.as_str(), opts.policy.as_str());
    report.failed_images = collected.failures.len();
    let run = EvalRun {
        report,
        records,
        failures: collected.failures,
        prompt_categories: category_range(&jobs),
        resumed: collected.resumed,
    };
    finish(opts, run, jobs.len())
}

/// Image extent for an expression without recorded dimensions: twice the
/// target's far corner.
fn rec_extent(e: &RefExpression) -> (f64, f64) {
    e.image_size.unwrap_or((2.0 * e.target.x2(), 2.0 * e.target.y2()))
}

/// Referring-expression evaluation: one query per expression, accuracy of
/// the top box at IoU strictly above 0.5.
pub fn run_rec(exprs: &[RefExpression], backend: &dyn Backend, opts: &EvalOptions) -> Result<EvalRun, HarnessError> {
    prepare_dir(opts)?;
    let jobs: Vec<Job> = exprs
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let (spec, truth) = refexp_spec(e);
            let (width, height) = rec_extent(e);
            Job {
                key: Key {
                    image_id: e.image_id,
                    expression: Some(i),
                },
                image: image_ref(&opts.image_root, None, e.image_id),
                width,
                height,
                spec,
                truth,
            }
        })
        .collect();
    let collected = collect(&jobs, backend, opts)?;
    let mut records = Vec::new();
    let mut preds = Vec::with_capacity(jobs.len());
    for (job, raw) in jobs.iter().zip(&collected.raws) {
        match raw {
            Some(raw) => {
                let rec = convert(job, raw, opts);
                preds.push(rec.detections.clone());
                records.push(rec);
            }
            None => preds.push(Vec::new()),
        }
    }
    let mut report = evaluate_detections(&[], &[], &CategoryVocab::default(), "rec", opts.policy.as_str());
    report.rec_accuracy = rec_accuracy(&preds, exprs);
    report.rec_expressions = exprs.len();
    report.failed_images = collected.failures.len();
    let run = EvalRun {
        report,
        records,
        failures: collected.failures,
        prompt_categories: category_range(&jobs),
        resumed: collected.resumed,
    };
    finish(opts, run, jobs.len())
}
