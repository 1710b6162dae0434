//! Batch execution over a dataset.
//!
//! Loads `id,text,gold` CSVs, runs the agent loop over every sample with a
//! bounded worker pool, streams one event per finished sample plus a final
//! summary event, appends every model attempt to a JSON-lines session log,
//! and writes `summary.json` and `export.csv` under `<output_dir>/<run_id>/`.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    run_sample, AnnotatorResponse, ConfigError, ExamplePair, ExperimentConfig, InteractionSink,
    PromptTemplates, ReviewerResponse,
};
use crate::evaluator::{fmt_metric, macro_average, micro_average, MacroAverage, SampleMetrics};
use crate::providers::{AttemptRecord, ChatRequest, Client, ErrorClass, SpecError};
use crate::tagspan::SpanDoc;

pub const DATASET_HEADER: [&str; 3] = ["id", "text", "gold"];

pub const EXPORT_HEADER: [&str; 14] = [
    "id",
    "text",
    "gold",
    "annotator_text",
    "annotator_reasoning",
    "reviewer_critique",
    "final_text",
    "p_pre",
    "r_pre",
    "f1_pre",
    "p_post",
    "r_post",
    "f1_post",
    "status",
];

pub const SESSION_LOG: &str = "session.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EXPORT_FILE: &str = "export.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub index: usize,
    pub id: String,
    pub text: String,
    /// Human-tagged text; may be empty.
    pub gold_tagged: String,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing header column {0:?} (expected header `id,text,gold`)")]
    MissingHeader(String),
    #[error("unexpected header {0:?} (expected exactly `id,text,gold`)")]
    UnexpectedHeader(String),
    #[error("duplicate id {id:?} at line {line}")]
    DuplicateId { id: String, line: u64 },
    #[error("line {line}: expected {expected} fields, found {found}")]
    RowFieldCount {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("dataset has no rows")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

fn csv_reader(data: &[u8]) -> csv::Reader<&[u8]> {
    let data = data.strip_prefix("\u{feff}".as_bytes()).unwrap_or(data);
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(data)
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<(), DatasetError> {
    for name in expected {
        if !found.iter().any(|h| h == *name) {
            return Err(DatasetError::MissingHeader(name.to_string()));
        }
    }
    if found.len() != expected.len() || found.iter().zip(expected).any(|(a, b)| a != *b) {
        return Err(DatasetError::UnexpectedHeader(
            found.iter().collect::<Vec<_>>().join(","),
        ));
    }
    Ok(())
}

/// Parses dataset CSV bytes with the exact header `id,text,gold`.
pub fn parse_dataset_csv(data: &[u8]) -> Result<Vec<Sample>, DatasetError> {
    let mut reader = csv_reader(data);
    check_header(reader.headers()?, &DATASET_HEADER)?;
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != DATASET_HEADER.len() {
            return Err(DatasetError::RowFieldCount {
                line,
                expected: DATASET_HEADER.len(),
                found: record.len(),
            });
        }
        let id = record[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId { id, line });
        }
        samples.push(Sample {
            index: samples.len(),
            id,
            text: record[1].to_string(),
            gold_tagged: record[2].to_string(),
        });
    }
    Ok(samples)
}

pub fn load_dataset_csv(path: &Path) -> Result<Vec<Sample>, DatasetError> {
    parse_dataset_csv(&fs::read(path)?)
}

/// Few-shot examples file: CSV with header `text,gold`.
pub fn parse_examples_csv(data: &[u8]) -> Result<Vec<ExamplePair>, DatasetError> {
    let mut reader = csv_reader(data);
    check_header(reader.headers()?, &["text", "gold"])?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 2 {
            return Err(DatasetError::RowFieldCount {
                line: record.position().map_or(0, |p| p.line()),
                expected: 2,
                found: record.len(),
            });
        }
        out.push(ExamplePair {
            source_text: record[0].to_string(),
            gold_tagged: record[1].to_string(),
        });
    }
    if out.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(out)
}

pub fn load_examples_csv(path: &Path) -> Result<Vec<ExamplePair>, DatasetError> {
    parse_examples_csv(&fs::read(path)?)
}

/// One prediction keyed by sample id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub id: String,
    pub tagged: String,
}

/// Predictions CSV: an `id` column plus a `pred` or `final_text` column;
/// other columns are ignored, so a run's `export.csv` can be read directly.
pub fn parse_predictions_csv(data: &[u8]) -> Result<Vec<Prediction>, DatasetError> {
    let mut reader = csv_reader(data);
    let header = reader.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let id_col = col("id").ok_or_else(|| DatasetError::MissingHeader("id".into()))?;
    let pred_col = col("pred")
        .or_else(|| col("final_text"))
        .ok_or_else(|| DatasetError::MissingHeader("pred".into()))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(DatasetError::RowFieldCount {
                line,
                expected: header.len(),
                found: record.len(),
            });
        }
        let id = record[id_col].to_string();
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId { id, line });
        }
        out.push(Prediction {
            id,
            tagged: record[pred_col].to_string(),
        });
    }
    Ok(out)
}

pub fn load_predictions_csv(path: &Path) -> Result<Vec<Prediction>, DatasetError> {
    parse_predictions_csv(&fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentRole {
    Annotator,
    Reviewer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SampleStatus {
    Ok,
    ReviewFailed,
    Failed,
    SkippedEmptyGold,
}

impl SampleStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleStatus::Ok => "Ok",
            SampleStatus::ReviewFailed => "ReviewFailed",
            SampleStatus::Failed => "Failed",
            SampleStatus::SkippedEmptyGold => "SkippedEmptyGold",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample: Sample,
    pub annotator_response: Option<AnnotatorResponse>,
    pub reviewer_response: Option<ReviewerResponse>,
    pub metrics_pre: Option<SampleMetrics>,
    pub metrics_post: Option<SampleMetrics>,
    pub status: SampleStatus,
    pub error_class: Option<ErrorClass>,
    pub error_detail: Option<String>,
    /// Parsed final annotation, for span highlighting.
    pub final_doc: Option<SpanDoc>,
}

impl SampleOutcome {
    pub fn new(sample: Sample) -> Self {
        SampleOutcome {
            sample,
            annotator_response: None,
            reviewer_response: None,
            metrics_pre: None,
            metrics_post: None,
            status: SampleStatus::Failed,
            error_class: None,
            error_detail: None,
            final_doc: None,
        }
    }

    /// Status label with the failure class, e.g. `Failed(Truncated)`.
    pub fn status_label(&self) -> String {
        match (self.status, self.error_class) {
            (SampleStatus::Failed | SampleStatus::ReviewFailed, Some(class)) => {
                format!("{}({class})", self.status.as_str())
            }
            (status, _) => status.as_str().to_string(),
        }
    }

    /// Tagged text after review (or the annotator's when not reviewed).
    pub fn final_text(&self) -> Option<&str> {
        self.reviewer_response
            .as_ref()
            .map(|r| r.revised_text.as_str())
            .or(self.annotator_response.as_ref().map(|a| a.annotated_text.as_str()))
    }
}

/// One model attempt, as persisted in the session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    /// UTC, millisecond precision.
    pub timestamp: DateTime<Utc>,
    pub run_id: String,
    pub sample_id: String,
    pub agent_role: AgentRole,
    pub attempt: u32,
    pub request_system: String,
    pub request_user: String,
    pub raw_response: String,
    pub error_class: Option<ErrorClass>,
    pub error_detail: Option<String>,
    pub http_status: Option<u16>,
    pub prompt_tokens: Option<u64>,
    pub output_tokens: Option<u64>,
}

impl LogEntry {
    pub fn from_attempt(
        run_id: &str,
        sample_id: &str,
        role: AgentRole,
        request: &ChatRequest,
        attempt: &AttemptRecord,
    ) -> Self {
        let resp = attempt.response.as_ref();
        LogEntry {
            timestamp: Utc::now(),
            run_id: run_id.to_string(),
            sample_id: sample_id.to_string(),
            agent_role: role,
            attempt: attempt.attempt,
            request_system: request.system.clone(),
            request_user: request.user.clone(),
            raw_response: resp.map(|r| r.body_text.clone()).unwrap_or_default(),
            error_class: attempt.error.as_ref().map(|e| e.class),
            error_detail: attempt.error.as_ref().map(|e| e.detail.clone()),
            http_status: resp.map(|r| r.http_status),
            prompt_tokens: resp.and_then(|r| r.prompt_tokens),
            output_tokens: resp.and_then(|r| r.output_tokens),
        }
    }
}

fn truncate_millis(ts: DateTime<Utc>) -> DateTime<Utc> {
    DateTime::from_timestamp_millis(ts.timestamp_millis()).unwrap_or(ts)
}

struct LogWriterState {
    out: BufWriter<File>,
    last: Option<DateTime<Utc>>,
    count: usize,
}

/// Append-only JSON-lines writer. Writes are serialized and flushed per
/// line; timestamps are clamped to be nondecreasing.
pub struct SessionLog {
    path: PathBuf,
    state: Mutex<LogWriterState>,
}

impl SessionLog {
    pub fn create(path: &Path) -> io::Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(SessionLog {
            path: path.to_path_buf(),
            state: Mutex::new(LogWriterState {
                out: BufWriter::new(file),
                last: None,
                count: 0,
            }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, mut entry: LogEntry) -> io::Result<()> {
        let mut state = self.state.lock().expect("log writer");
        let ts = truncate_millis(entry.timestamp.max(Utc::now()));
        let ts = state.last.map_or(ts, |last| ts.max(last));
        entry.timestamp = ts;
        state.last = Some(ts);
        let line = serde_json::to_string(&entry).map_err(io::Error::other)?;
        state.out.write_all(line.as_bytes())?;
        state.out.write_all(b"\n")?;
        state.out.flush()?;
        state.count += 1;
        Ok(())
    }

    pub fn entries_written(&self) -> usize {
        self.state.lock().expect("log writer").count
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogWarning {
    /// The final line was incomplete and dropped.
    TruncatedTail { line: usize },
}

/// Reads a session log, dropping an unparseable final line.
pub fn read_log(path: &Path) -> io::Result<(Vec<LogEntry>, Vec<LogWarning>)> {
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
    let mut entries = Vec::with_capacity(lines.len());
    let mut warnings = Vec::new();
    let last_nonempty = lines.iter().rposition(|l| !l.trim().is_empty());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogEntry>(line) {
            Ok(entry) => entries.push(entry),
            Err(_) if Some(i) == last_nonempty => {
                warnings.push(LogWarning::TruncatedTail { line: i + 1 });
            }
            Err(e) => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("session log line {}: {e}", i + 1),
                ))
            }
        }
    }
    Ok((entries, warnings))
}

pub fn run_dir(output_dir: &Path, run_id: &str) -> PathBuf {
    output_dir.join(run_id)
}

/// Session log of a persisted run.
pub fn read_run_log(output_dir: &Path, run_id: &str) -> io::Result<(Vec<LogEntry>, Vec<LogWarning>)> {
    read_log(&run_dir(output_dir, run_id).join(SESSION_LOG))
}

fn default_workers() -> usize {
    4
}

fn default_baseline() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Reference line for the live F1 chart.
    #[serde(default = "default_baseline")]
    pub baseline_f1: f64,
    pub output_dir: PathBuf,
    pub run_id: String,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.experiment.validate()?;
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.baseline_f1) {
            return Err(ConfigError::Invalid("baseline_f1 must be in [0, 1]".into()));
        }
        if !is_safe_run_id(&self.run_id) {
            return Err(ConfigError::Invalid(format!(
                "run_id {:?} must be nonempty and use only letters, digits, '-', '_' or '.'",
                self.run_id
            )));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        run_dir(&self.output_dir, &self.run_id)
    }
}

pub fn is_safe_run_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// A fresh run id such as `run-20260101-120000-1a2b3c`.
pub fn new_run_id() -> String {
    let suffix = uuid::Uuid::new_v4().simple().to_string();
    format!("run-{}-{}", Utc::now().format("%Y%m%d-%H%M%S"), &suffix[..6])
}

/// The parts of a run's configuration that determine its results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub experiment: ExperimentConfig,
    pub baseline_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEvent {
    pub index: usize,
    pub id: String,
    pub f1_pre: Option<f64>,
    pub f1_post: Option<f64>,
    pub status: SampleStatus,
    pub status_label: String,
    pub error_class: Option<ErrorClass>,
    pub completed: usize,
    pub total: usize,
    pub progress: f64,
    pub macro_pre: Option<MacroAverage>,
    pub macro_post: Option<MacroAverage>,
    pub baseline_f1: f64,
    pub final_doc: Option<SpanDoc>,
    pub reasoning: Option<String>,
    pub critique: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEvent {
    pub run_id: String,
    pub completed: usize,
    pub total: usize,
    pub complete: bool,
    pub macro_pre: Option<MacroAverage>,
    pub macro_post: Option<MacroAverage>,
    pub micro_pre: Option<SampleMetrics>,
    pub micro_post: Option<SampleMetrics>,
    pub status_counts: BTreeMap<String, usize>,
    pub baseline_f1: f64,
}

/// Live progress, serialized with a `type` discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RunEvent {
    Sample(SampleEvent),
    Summary(SummaryEvent),
}

impl RunEvent {
    /// Single-line JSON.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("events serialize")
    }
}

pub trait EventSink: Send + Sync {
    fn emit(&self, event: &RunEvent);
}

impl<F> EventSink for F
where
    F: Fn(&RunEvent) + Send + Sync,
{
    fn emit(&self, event: &RunEvent) {
        self(event)
    }
}

pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&self, _event: &RunEvent) {}
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub config: ConfigSnapshot,
    /// Sorted by sample index.
    pub outcomes: Vec<SampleOutcome>,
    pub macro_pre: Option<MacroAverage>,
    pub macro_post: Option<MacroAverage>,
    pub micro_pre: Option<SampleMetrics>,
    pub micro_post: Option<SampleMetrics>,
    pub status_counts: BTreeMap<String, usize>,
    pub error_counts: BTreeMap<String, usize>,
    pub total_samples: usize,
    /// False when the run was cancelled before every sample finished.
    pub complete: bool,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl RunSummary {
    pub fn any_failed(&self) -> bool {
        self.outcomes.iter().any(|o| o.status == SampleStatus::Failed)
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let data = fs::read(path)?;
        serde_json::from_slice(&data).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn summary_event(&self) -> RunEvent {
        RunEvent::Summary(SummaryEvent {
            run_id: self.run_id.clone(),
            completed: self.outcomes.len(),
            total: self.total_samples,
            complete: self.complete,
            macro_pre: self.macro_pre,
            macro_post: self.macro_post,
            micro_pre: self.micro_pre.clone(),
            micro_post: self.micro_post.clone(),
            status_counts: self.status_counts.clone(),
            baseline_f1: self.config.baseline_f1,
        })
    }
}

fn pre_metrics(outcomes: &[SampleOutcome]) -> impl Iterator<Item = &SampleMetrics> {
    outcomes.iter().filter_map(|o| o.metrics_pre.as_ref())
}

fn post_metrics(outcomes: &[SampleOutcome]) -> impl Iterator<Item = &SampleMetrics> {
    outcomes.iter().filter_map(|o| o.metrics_post.as_ref())
}

/// Assembles a summary from outcomes in any order.
pub fn summarize(
    run_id: &str,
    config: ConfigSnapshot,
    mut outcomes: Vec<SampleOutcome>,
    total_samples: usize,
    started_at: DateTime<Utc>,
) -> RunSummary {
    outcomes.sort_by_key(|o| o.sample.index);
    let mut status_counts = BTreeMap::new();
    let mut error_counts = BTreeMap::new();
    for o in &outcomes {
        *status_counts.entry(o.status.as_str().to_string()).or_insert(0) += 1;
        if let Some(class) = o.error_class {
            *error_counts.entry(class.to_string()).or_insert(0) += 1;
        }
    }
    RunSummary {
        run_id: run_id.to_string(),
        config,
        macro_pre: macro_average(pre_metrics(&outcomes)).ok(),
        macro_post: macro_average(post_metrics(&outcomes)).ok(),
        micro_pre: micro_average(pre_metrics(&outcomes)).ok(),
        micro_post: micro_average(post_metrics(&outcomes)).ok(),
        status_counts,
        error_counts,
        complete: outcomes.len() == total_samples,
        total_samples,
        outcomes,
        started_at,
        finished_at: Utc::now(),
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Model clients for one run.
#[derive(Clone)]
pub struct RunClients {
    pub annotator: Arc<Client>,
    pub reviewer: Option<Arc<Client>>,
}

impl RunClients {
    /// Builds clients from the experiment's model specs; the reviewer is
    /// only built when Reviewer Mode is on.
    pub fn from_config(config: &ExperimentConfig) -> Result<Self, SpecError> {
        let annotator = Arc::new(Client::from_spec(config.effective_annotator_spec())?);
        let reviewer = match (&config.reviewer, config.reviewer_mode) {
            (Some(spec), true) => Some(Arc::new(Client::from_spec(spec.clone())?)),
            _ => None,
        };
        Ok(RunClients {
            annotator,
            reviewer,
        })
    }
}

struct LogRecorder<'a> {
    log: &'a SessionLog,
    log_error: &'a Mutex<Option<io::Error>>,
    run_id: &'a str,
    sample_id: &'a str,
}

impl InteractionSink for LogRecorder<'_> {
    fn record(&self, role: AgentRole, request: &ChatRequest, attempt: &AttemptRecord) {
        let entry = LogEntry::from_attempt(self.run_id, self.sample_id, role, request, attempt);
        if let Err(e) = self.log.append(entry) {
            self.log_error
                .lock()
                .expect("log error slot")
                .get_or_insert(e);
        }
    }
}

struct Progress {
    outcomes: Vec<SampleOutcome>,
}

/// Runs every sample and persists the run.
///
/// Per-sample failures are recorded in the outcomes; only configuration,
/// dataset or filesystem problems abort. Setting `cancel` stops new samples
/// from starting; finished ones are kept and the summary is marked
/// incomplete.
pub async fn run_batch(
    config: &RunConfig,
    dataset: &[Sample],
    clients: &RunClients,
    templates: &PromptTemplates,
    sink: &dyn EventSink,
    cancel: Option<&AtomicBool>,
) -> Result<RunSummary, RunError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(RunError::EmptyDataset);
    }
    let dir = config.run_dir();
    fs::create_dir_all(&dir)?;
    let log = SessionLog::create(&dir.join(SESSION_LOG))?;
    let log_error: Mutex<Option<io::Error>> = Mutex::new(None);
    let started_at = Utc::now();
    let total = dataset.len();
    let experiment = &config.experiment;
    let reviewer = clients.reviewer.as_deref();

    let progress = Mutex::new(Progress {
        outcomes: Vec::with_capacity(total),
    });

    let tasks = futures::stream::iter(0..total).map(|i| {
        let sample = &dataset[i];
        let log = &log;
        let log_error = &log_error;
        async move {
            if cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
                return None;
            }
            let record = LogRecorder {
                log,
                log_error,
                run_id: &config.run_id,
                sample_id: &sample.id,
            };
            Some(run_sample(sample, experiment, templates, &clients.annotator, reviewer, &record).await)
        }
    });
    let mut completions = tasks.buffer_unordered(config.workers);
    while let Some(result) = completions.next().await {
        let Some(outcome) = result else { continue };
        let event = {
            let mut p = progress.lock().expect("progress");
            p.outcomes.push(outcome);
            let outcome = p.outcomes.last().expect("just pushed");
            let completed = p.outcomes.len();
            RunEvent::Sample(SampleEvent {
                index: outcome.sample.index,
                id: outcome.sample.id.clone(),
                f1_pre: outcome.metrics_pre.as_ref().map(|m| m.f1),
                f1_post: outcome.metrics_post.as_ref().map(|m| m.f1),
                status: outcome.status,
                status_label: outcome.status_label(),
                error_class: outcome.error_class,
                completed,
                total,
                progress: completed as f64 / total as f64,
                macro_pre: macro_average(pre_metrics(&p.outcomes)).ok(),
                macro_post: macro_average(post_metrics(&p.outcomes)).ok(),
                baseline_f1: config.baseline_f1,
                final_doc: outcome.final_doc.clone(),
                reasoning: outcome.annotator_response.as_ref().map(|a| a.reasoning.clone()),
                critique: outcome.reviewer_response.as_ref().map(|r| r.critique.clone()),
            })
        };
        sink.emit(&event);
    }
    drop(completions);

    if let Some(e) = log_error.lock().expect("log error slot").take() {
        return Err(RunError::Io(e));
    }
    let outcomes = progress.into_inner().expect("progress").outcomes;
    let summary = summarize(
        &config.run_id,
        ConfigSnapshot {
            experiment: experiment.clone(),
            baseline_f1: config.baseline_f1,
        },
        outcomes,
        total,
        started_at,
    );
    write_run_artifacts(&dir, &summary)?;
    sink.emit(&summary.summary_event());
    Ok(summary)
}

/// Writes `summary.json` and `export.csv` into `dir`.
pub fn write_run_artifacts(dir: &Path, summary: &RunSummary) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SUMMARY_FILE), summary.to_json())?;
    fs::write(dir.join(EXPORT_FILE), export_csv(summary))?;
    Ok(())
}

fn metric_cells(m: Option<&SampleMetrics>) -> [String; 3] {
    match m {
        Some(m) => [fmt_metric(m.precision), fmt_metric(m.recall), fmt_metric(m.f1)],
        None => Default::default(),
    }
}

/// The per-sample CSV export: fixed header, dataset order, 4-decimal
/// metrics, LF line endings.
pub fn export_csv(summary: &RunSummary) -> Vec<u8> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    writer.write_record(EXPORT_HEADER).expect("write to Vec");
    for o in &summary.outcomes {
        let [p_pre, r_pre, f1_pre] = metric_cells(o.metrics_pre.as_ref());
        let [p_post, r_post, f1_post] = metric_cells(o.metrics_post.as_ref());
        let annotator = o.annotator_response.as_ref();
        writer
            .write_record([
                o.sample.id.as_str(),
                &o.sample.text,
                &o.sample.gold_tagged,
                annotator.map_or("", |a| a.annotated_text.as_str()),
                annotator.map_or("", |a| a.reasoning.as_str()),
                o.reviewer_response.as_ref().map_or("", |r| r.critique.as_str()),
                o.final_text().unwrap_or(""),
                &p_pre,
                &r_pre,
                &f1_pre,
                &p_post,
                &r_post,
                &f1_post,
                &o.status_label(),
            ])
            .expect("write to Vec");
    }
    writer.into_inner().expect("flush to Vec")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predictions_from_export_columns() {
        let p = parse_predictions_csv(b"id,text,final_text,status\na,x,<M>x</M>,Ok\n").unwrap();
        assert_eq!(p, vec![Prediction { id: "a".into(), tagged: "<M>x</M>".into() }]);
        let p = parse_predictions_csv(b"pred,id\ny,b\n").unwrap();
        assert_eq!(p[0].id, "b");
        assert!(matches!(
            parse_predictions_csv(b"id,text\n"),
            Err(DatasetError::MissingHeader(c)) if c == "pred"
        ));
        assert!(parse_predictions_csv(b"id,pred\na,x\na,y\n").is_err());
    }

    #[test]
    fn run_ids_are_safe() {
        let id = new_run_id();
        assert!(is_safe_run_id(&id), "{id}");
        assert_ne!(id, new_run_id());
    }

    #[test]
    fn dataset_in_order() {
        let s = parse_dataset_csv(b"id,text,gold\na,x y,x <Metaphor>y</Metaphor>\nb,z,\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].index, s[0].id.as_str()), (0, "a"));
        assert_eq!((s[1].index, s[1].gold_tagged.as_str()), (1, ""));
    }

    #[test]
    fn dataset_missing_gold_header() {
        let err = parse_dataset_csv(b"id,text\na,b\n").unwrap_err();
        assert!(matches!(&err, DatasetError::MissingHeader(c) if c == "gold"));
        assert!(err.to_string().contains("gold"));
    }

    #[test]
    fn dataset_header_must_be_exact() {
        assert!(matches!(
            parse_dataset_csv(b"text,id,gold\n"),
            Err(DatasetError::UnexpectedHeader(_))
        ));
    }

    #[test]
    fn dataset_quoted_fields() {
        let s = parse_dataset_csv(b"id,text,gold\n1,\"a, b\nc \"\"q\"\"\",\"g,\"\n").unwrap();
        assert_eq!(s[0].text, "a, b\nc \"q\"");
        assert_eq!(s[0].gold_tagged, "g,");
    }

    #[test]
    fn dataset_errors() {
        assert!(matches!(
            parse_dataset_csv(b"id,text,gold\na,b,c\na,d,e\n"),
            Err(DatasetError::DuplicateId { .. })
        ));
        assert!(matches!(
            parse_dataset_csv(b"id,text,gold\na,b\n"),
            Err(DatasetError::RowFieldCount { expected: 3, found: 2, .. })
        ));
        let bom = parse_dataset_csv("\u{feff}id,text,gold\na,b,c\n".as_bytes()).unwrap();
        assert_eq!(bom[0].id, "a");
    }

    #[test]
    fn examples_file() {
        let ex = parse_examples_csv(b"text,gold\na b,a <Metaphor>b</Metaphor>\n").unwrap();
        assert_eq!(ex[0].source_text, "a b");
        assert!(matches!(parse_examples_csv(b"text,gold\n"), Err(DatasetError::Empty)));
    }

    #[test]
    fn status_labels() {
        let mut o = SampleOutcome::new(Sample {
            index: 0,
            id: "a".into(),
            text: String::new(),
            gold_tagged: String::new(),
        });
        o.error_class = Some(ErrorClass::Truncated);
        assert_eq!(o.status_label(), "Failed(Truncated)");
        o.status = SampleStatus::SkippedEmptyGold;
        o.error_class = None;
        assert_eq!(o.status_label(), "SkippedEmptyGold");
    }

    #[test]
    fn run_id_safety() {
        assert!(is_safe_run_id("run-2026_01.a"));
        assert!(!is_safe_run_id("../x"));
        assert!(!is_safe_run_id(""));
        assert!(!is_safe_run_id("a/b"));
    }

    fn entry(i: u32) -> LogEntry {
        LogEntry {
            timestamp: Utc::now(),
            run_id: "r".into(),
            sample_id: format!("s{i}"),
            agent_role: AgentRole::Annotator,
            attempt: i,
            request_system: "sys".into(),
            request_user: "user \"quoted\"\nline".into(),
            raw_response: "{}".into(),
            error_class: None,
            error_detail: None,
            http_status: Some(200),
            prompt_tokens: None,
            output_tokens: Some(3),
        }
    }

    #[test]
    fn log_round_trip_100() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("session.jsonl");
        let log = SessionLog::create(&path).unwrap();
        for i in 0..100 {
            log.append(entry(i)).unwrap();
        }
        assert_eq!(log.entries_written(), 100);
        let (entries, warnings) = read_log(&path).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(entries.len(), 100);
        for (i, e) in entries.iter().enumerate() {
            let mut expected = entry(i as u32);
            expected.timestamp = e.timestamp;
            assert_eq!(*e, expected);
            assert_eq!(e.timestamp.timestamp_subsec_nanos() % 1_000_000, 0);
        }
        assert!(entries.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 100);
    }

    #[test]
    fn log_truncated_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("session.jsonl");
        let log = SessionLog::create(&path).unwrap();
        log.append(entry(1)).unwrap();
        log.append(entry(2)).unwrap();
        drop(log);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"timestamp\":\"2026-01-").unwrap();
        let (entries, warnings) = read_log(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(warnings, vec![LogWarning::TruncatedTail { line: 3 }]);
    }

    #[test]
    fn log_garbage_in_middle_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("session.jsonl");
        let good = serde_json::to_string(&entry(1)).unwrap();
        fs::write(&path, format!("garbage\n{good}\n")).unwrap();
        assert!(read_log(&path).is_err());
    }
}
