//! Bi-temporal JSONL audit trail: one hash-carrying record per run,
//! serialized appends, as-of queries and replay attestation.
//!
//! Every line carries `schema_version` and an `event` tag (`run` or
//! `retry`). Records are independently verifiable; there is no chaining.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{sha256_hex, sha256_parts};
use crate::invariants::InvariantVerdict;
use crate::metrics::Decision;
use crate::provider::{generate, DecodingConfig, EndpointKind, EnvironmentManifest, ProviderEndpoint, ProviderError};
use crate::tasks::TaskId;

pub const TRACE_SCHEMA_VERSION: &str = "driftwatch.trace/1";

#[derive(Debug, Error)]
pub enum AttestationError {
    #[error("run_id {0} already present in trace")]
    DuplicateRun(String),
    #[error("invalid trace record: {0}")]
    InvalidRecord(String),
    #[error("corrupt trace at line {line}: {message}")]
    CorruptTrace { line: usize, message: String },
    #[error("i/o at {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AttestationError + '_ {
    move |source| AttestationError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplianceTag {
    CitationAccuracy,
    SchemaViolation,
    DecisionFlip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub schema_version: String,
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_of: Option<String>,
    pub task_id: TaskId,
    pub case_id: String,
    pub template_version: String,
    pub endpoint_name: String,
    pub provider_kind: EndpointKind,
    pub model_id: String,
    pub decoding: DecodingConfig,
    pub concurrency: u32,
    pub trial_index: u32,
    pub wave: u32,
    pub jitter_ms: f64,
    pub prompt: String,
    pub prompt_sha256: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub response: String,
    pub response_sha256: String,
    pub latency_ms: f64,
    pub input_tokens: Option<u64>,
    pub generated_tokens: Option<u64>,
    pub citations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
    pub verdict: InvariantVerdict,
    pub retrieval_provenance: Vec<String>,
    pub manifest_ref: String,
    pub config_hash: String,
    pub corpus_version_id: String,
    pub compliance_tags: Vec<ComplianceTag>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provider_meta: BTreeMap<String, serde_json::Value>,
    pub valid_time: DateTime<Utc>,
    pub record_time: DateTime<Utc>,
}

impl TraceRecord {
    /// Hash and schema gates applied before any write.
    pub fn validate(&self) -> Result<(), AttestationError> {
        let bad = |m: String| Err(AttestationError::InvalidRecord(m));
        if self.schema_version != TRACE_SCHEMA_VERSION {
            return bad(format!("schema_version {:?}", self.schema_version));
        }
        if self.run_id.is_empty() {
            return bad("empty run_id".into());
        }
        if self.prompt_sha256 != hash_output(&self.prompt) {
            return bad(format!("{}: prompt_sha256 does not match prompt", self.run_id));
        }
        if self.response_sha256 != hash_output(&self.response) {
            return bad(format!("{}: response_sha256 does not match response", self.run_id));
        }
        if self.latency_ms.is_nan() || self.latency_ms < 0.0 {
            return bad(format!("{}: negative latency", self.run_id));
        }
        Ok(())
    }
}

/// A failed attempt that was retried; written before the run it precedes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryEvent {
    pub schema_version: String,
    pub run_id: String,
    pub attempt: u32,
    pub error: String,
    pub valid_time: DateTime<Utc>,
    pub record_time: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum TraceLine {
    Run(TraceRecord),
    Retry(RetryEvent),
}

impl TraceLine {
    fn record_time(&self) -> DateTime<Utc> {
        match self {
            TraceLine::Run(r) => r.record_time,
            TraceLine::Retry(r) => r.record_time,
        }
    }
}

pub fn hash_output(text: &str) -> String {
    sha256_hex(text)
}

/// Reproducible run identifier for one trial of one condition.
#[allow(clippy::too_many_arguments)]
pub fn run_id(
    config_hash: &str,
    endpoint: &str,
    task: TaskId,
    case_id: &str,
    temperature: f64,
    concurrency: u32,
    seed: u64,
    trial_index: u32,
) -> String {
    sha256_parts([
        config_hash.to_string(),
        endpoint.to_string(),
        task.as_str().to_string(),
        case_id.to_string(),
        format!("{temperature}"),
        concurrency.to_string(),
        seed.to_string(),
        trial_index.to_string(),
    ])
}

fn encode(line: &TraceLine) -> Vec<u8> {
    // serde_json escapes control characters, so one value is one line
    let mut bytes = serde_json::to_vec(line).expect("trace line serializes");
    bytes.push(b'\n');
    bytes
}

/// Parses a trace. An unterminated final fragment that does not parse is
/// a write in progress and is ignored.
pub fn read_trace(path: &Path) -> Result<Vec<TraceLine>, AttestationError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let terminated = buf.ends_with('\n');
        let text = buf.trim_end_matches(['\n', '\r']);
        if text.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceLine>(text) {
            Ok(l) => out.push(l),
            Err(_) if !terminated => break,
            Err(e) => {
                return Err(AttestationError::CorruptTrace {
                    line: line_no,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

pub fn read_runs(path: &Path) -> Result<Vec<TraceRecord>, AttestationError> {
    Ok(read_trace(path)?
        .into_iter()
        .filter_map(|l| match l {
            TraceLine::Run(r) => Some(r),
            TraceLine::Retry(_) => None,
        })
        .collect())
}

/// Appends one validated record. The file must not already contain the
/// run_id and the record must not predate the last appended line.
pub fn append_trace(record: &TraceRecord, path: &Path) -> Result<(), AttestationError> {
    record.validate()?;
    if record.record_time < record.valid_time {
        return Err(AttestationError::InvalidRecord(format!(
            "{}: record_time precedes valid_time",
            record.run_id
        )));
    }
    let existing = if path.exists() { read_trace(path)? } else { Vec::new() };
    for line in &existing {
        if let TraceLine::Run(r) = line {
            if r.run_id == record.run_id {
                return Err(AttestationError::DuplicateRun(record.run_id.clone()));
            }
        }
    }
    if let Some(last) = existing.iter().map(TraceLine::record_time).max() {
        if record.record_time < last {
            return Err(AttestationError::InvalidRecord(format!(
                "{}: record_time earlier than last appended record",
                record.run_id
            )));
        }
    }
    let line = TraceLine::Run(record.clone());
    append_bytes(path, &encode(&line))
}

fn append_bytes(path: &Path, bytes: &[u8]) -> Result<(), AttestationError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

struct WriterState {
    file: File,
    run_ids: HashSet<String>,
    last: Option<DateTime<Utc>>,
}

/// Serialized appender shared by all workers writing one trace file.
/// It stamps `record_time` itself so append order is record_time order.
pub struct TraceWriter {
    path: PathBuf,
    state: Mutex<WriterState>,
}

impl TraceWriter {
    pub fn open(path: &Path) -> Result<Self, AttestationError> {
        let existing = if path.exists() { read_trace(path)? } else { Vec::new() };
        let run_ids = existing
            .iter()
            .filter_map(|l| match l {
                TraceLine::Run(r) => Some(r.run_id.clone()),
                TraceLine::Retry(_) => None,
            })
            .collect();
        let last = existing.iter().map(TraceLine::record_time).max();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            state: Mutex::new(WriterState { file, run_ids, last }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn stamp(state: &mut WriterState, valid_time: DateTime<Utc>) -> DateTime<Utc> {
        let mut t = Utc::now().max(valid_time);
        if let Some(last) = state.last {
            t = t.max(last);
        }
        state.last = Some(t);
        t
    }

    fn write(&self, state: &mut WriterState, line: &TraceLine) -> Result<(), AttestationError> {
        state.file.write_all(&encode(line)).map_err(io_err(&self.path))?;
        state.file.flush().map_err(io_err(&self.path))
    }

    /// Validates, stamps `record_time` and appends; returns the record as
    /// written.
    pub fn append(&self, mut record: TraceRecord) -> Result<TraceRecord, AttestationError> {
        record.validate()?;
        let mut state = self.state.lock().unwrap_or_else(|p| p.into_inner());
        if state.run_ids.contains(&record.run_id) {
            return Err(AttestationError::DuplicateRun(record.run_id));
        }
        record.record_time = Self::stamp(&mut state, record.valid_time);
        let line = TraceLine::Run(record);
        self.write(&mut state, &line)?;
        let TraceLine::Run(record) = line else { unreachable!() };
        state.run_ids.insert(record.run_id.clone());
        Ok(record)
    }

    pub fn append_retry(&self, run_id: &str, attempt: u32, error: &str, valid_time: DateTime<Utc>) -> Result<(), AttestationError> {
        let mut state = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let record_time = Self::stamp(&mut state, valid_time);
        let line = TraceLine::Retry(RetryEvent {
            schema_version: TRACE_SCHEMA_VERSION.to_string(),
            run_id: run_id.to_string(),
            attempt,
            error: error.to_string(),
            valid_time,
            record_time,
        });
        self.write(&mut state, &line)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeAxis {
    ValidTime,
    RecordTime,
}

/// Run records whose chosen timestamp is at or before `as_of`, in file order.
pub fn query_asof(path: &Path, as_of: DateTime<Utc>, axis: TimeAxis) -> Result<Vec<TraceRecord>, AttestationError> {
    Ok(read_runs(path)?
        .into_iter()
        .filter(|r| {
            let t = match axis {
                TimeAxis::ValidTime => r.valid_time,
                TimeAxis::RecordTime => r.record_time,
            };
            t <= as_of
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub run_id: String,
    pub old_hash: String,
    /// `None` when the replay call itself failed.
    pub new_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttestationVerdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttestationReport {
    pub trace_path: PathBuf,
    pub replay_trace_path: PathBuf,
    pub endpoint_name: String,
    pub total_runs: u64,
    /// Runs that failed originally and had nothing to compare.
    pub skipped: u64,
    pub matched: u64,
    pub mismatched: Vec<Mismatch>,
    pub manifest_consistent: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stale_corpus: Vec<String>,
    pub verdict: AttestationVerdict,
    pub created_at: DateTime<Utc>,
}

impl AttestationReport {
    pub fn replayed(&self) -> u64 {
        self.matched + self.mismatched.len() as u64
    }

    pub fn passed(&self) -> bool {
        self.verdict == AttestationVerdict::Pass
    }
}

/// Replay trace written next to the original: `<stem>.replay.jsonl`.
pub fn replay_trace_path(trace_path: &Path) -> PathBuf {
    let stem = trace_path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    trace_path.with_file_name(format!("{stem}.replay.jsonl"))
}

fn manifest_for(trace_path: &Path, manifest_ref: &str) -> Option<EnvironmentManifest> {
    let dir = trace_path.parent()?;
    [dir.join("manifests"), dir.parent()?.join("manifests")]
        .into_iter()
        .map(|d| d.join(format!("{manifest_ref}.json")))
        .find(|p| p.exists())
        .and_then(|p| EnvironmentManifest::load(&p).ok())
}

/// Re-executes every successful run in the trace against `endpoint` and
/// compares response hashes. The original trace is only read.
pub fn replay(trace_path: &Path, endpoint: &ProviderEndpoint, active_corpus_version: &str) -> Result<AttestationReport, AttestationError> {
    endpoint.validate()?;
    let records = read_runs(trace_path)?;
    let out_path = replay_trace_path(trace_path);
    let writer = TraceWriter::open(&out_path)?;
    let session = Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Nanos, true);

    let mut stale = Vec::new();
    let mut checked_manifests = HashSet::new();
    let mut matched = 0;
    let mut skipped = 0;
    let mut mismatched = Vec::new();

    for rec in records.iter().filter(|r| r.replay_of.is_none()) {
        if rec.corpus_version_id != active_corpus_version {
            stale.push(format!(
                "{}: corpus {} != active {active_corpus_version}",
                rec.run_id, rec.corpus_version_id
            ));
        }
        if checked_manifests.insert(rec.manifest_ref.clone()) {
            if let Some(m) = manifest_for(trace_path, &rec.manifest_ref) {
                if m.corpus_version_id != active_corpus_version {
                    stale.push(format!(
                        "manifest {}: corpus {} != active {active_corpus_version}",
                        m.manifest_id, m.corpus_version_id
                    ));
                }
            }
        }
        if rec.status == RunStatus::Failed {
            skipped += 1;
            continue;
        }

        let stored_consistent = hash_output(&rec.response) == rec.response_sha256;
        let valid_time = Utc::now();
        let fresh = generate(endpoint, &rec.prompt, &rec.decoding);
        let mut replay_rec = rec.clone();
        replay_rec.run_id = sha256_parts([rec.run_id.as_str(), "replay", session.as_str()]);
        replay_rec.replay_of = Some(rec.run_id.clone());
        replay_rec.endpoint_name = endpoint.name.clone();
        replay_rec.provider_kind = endpoint.kind;
        replay_rec.model_id = endpoint.model_id.clone();
        replay_rec.valid_time = valid_time;
        replay_rec.provider_meta = BTreeMap::new();
        match fresh {
            Ok(g) => {
                let new_hash = hash_output(&g.text);
                replay_rec.response_sha256 = new_hash.clone();
                replay_rec.response = g.text;
                replay_rec.latency_ms = g.latency_ms;
                replay_rec.input_tokens = g.input_tokens;
                replay_rec.generated_tokens = g.generated_tokens;
                replay_rec.status = RunStatus::Ok;
                replay_rec.error = None;
                if new_hash == rec.response_sha256 && stored_consistent {
                    matched += 1;
                } else {
                    mismatched.push(Mismatch {
                        run_id: rec.run_id.clone(),
                        old_hash: rec.response_sha256.clone(),
                        new_hash: Some(new_hash),
                        note: (!stored_consistent).then(|| "stored response does not match its recorded hash".into()),
                    });
                }
            }
            Err(e) => {
                replay_rec.response = String::new();
                replay_rec.response_sha256 = hash_output("");
                replay_rec.status = RunStatus::Failed;
                replay_rec.error = Some(e.to_string());
                mismatched.push(Mismatch {
                    run_id: rec.run_id.clone(),
                    old_hash: rec.response_sha256.clone(),
                    new_hash: None,
                    note: Some(e.to_string()),
                });
            }
        }
        writer.append(replay_rec)?;
    }

    for s in &stale {
        log::warn!("stale corpus: {s}");
    }
    let manifest_consistent = stale.is_empty();
    let verdict = if mismatched.is_empty() && manifest_consistent {
        AttestationVerdict::Pass
    } else {
        AttestationVerdict::Fail
    };
    Ok(AttestationReport {
        trace_path: trace_path.to_path_buf(),
        replay_trace_path: out_path,
        endpoint_name: endpoint.name.clone(),
        total_runs: records.iter().filter(|r| r.replay_of.is_none()).count() as u64,
        skipped,
        matched,
        mismatched,
        manifest_consistent,
        stale_corpus: stale,
        verdict,
        created_at: Utc::now(),
    })
}

/// Writes `dir/attestation-<stem>-<timestamp>.json`.
pub fn write_attestation_report(report: &AttestationReport, dir: &Path) -> Result<PathBuf, AttestationError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let stem = report.trace_path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    let path = dir.join(format!(
        "attestation-{stem}-{}.json",
        report.created_at.format("%Y%m%dT%H%M%S%.6fZ")
    ));
    let mut body = serde_json::to_vec_pretty(report).expect("report serializes");
    body.push(b'\n');
    fs::write(&path, body).map_err(io_err(&path))?;
    Ok(path)
}
