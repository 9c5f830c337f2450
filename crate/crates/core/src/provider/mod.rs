//! Uniform adapter over generation endpoints with pinned decoding
//! parameters, plus environment manifest capture.

mod http;
mod mock;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;

pub use mock::{canned_response, make_scripted_mock, make_stochastic_mock, MockSpec, ReplayEntry};

pub const DEFAULT_MAX_NEW_TOKENS: u32 = 512;
pub const DEFAULT_TIMEOUT_MS: u64 = 120_000;
pub const MAX_RETRIES: u32 = 2;
pub const HARNESS_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("invalid decoding config: {0}")]
    InvalidConfig(String),
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
    #[error("invalid mock: {0}")]
    InvalidMock(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("credential variable {0} is not set")]
    MissingCredential(String),
    #[error("provider unreachable: {0}")]
    ProviderUnreachable(String),
    #[error("provider rejected request with status {status}: {body}")]
    ProviderRejected { status: u16, body: String },
    #[error("provider timed out after {0:?}")]
    ProviderTimeout(Duration),
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("manifest i/o at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ProviderError {
    /// Only transport failures are worth retrying.
    pub fn is_transport(&self) -> bool {
        matches!(self, ProviderError::ProviderUnreachable(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodingMethod {
    Greedy,
    Sample,
}

impl DecodingMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecodingMethod::Greedy => "greedy",
            DecodingMethod::Sample => "sample",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    pub max_new_tokens: u32,
    #[serde(default)]
    pub stop: Vec<String>,
    pub decoding_method: DecodingMethod,
}

impl DecodingConfig {
    /// Protocol settings for a temperature: greedy at 0, sampling otherwise.
    pub fn for_temperature(temperature: f64, seed: u64) -> Self {
        Self {
            temperature,
            top_p: 1.0,
            seed,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            stop: Vec::new(),
            decoding_method: if temperature == 0.0 {
                DecodingMethod::Greedy
            } else {
                DecodingMethod::Sample
            },
        }
    }

    pub fn greedy(seed: u64) -> Self {
        Self::for_temperature(0.0, seed)
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        let bad = |m: String| Err(ProviderError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.temperature) {
            return bad(format!("temperature {} outside [0, 1]", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p {} outside (0, 1]", self.top_p));
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive".into());
        }
        match (self.temperature == 0.0, self.decoding_method) {
            (true, DecodingMethod::Sample) => bad("temperature 0 requires greedy decoding".into()),
            (false, DecodingMethod::Greedy) => bad(format!(
                "greedy decoding requires temperature 0, got {}",
                self.temperature
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    OllamaCompatible,
    WatsonxStyle,
    MockReplay,
    MockStochastic,
}

impl EndpointKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EndpointKind::OllamaCompatible => "ollama_compatible",
            EndpointKind::WatsonxStyle => "watsonx_style",
            EndpointKind::MockReplay => "mock_replay",
            EndpointKind::MockStochastic => "mock_stochastic",
        }
    }

    pub fn is_network(&self) -> bool {
        matches!(self, EndpointKind::OllamaCompatible | EndpointKind::WatsonxStyle)
    }
}

impl fmt::Display for EndpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EndpointKind {
    type Err = ProviderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| ProviderError::InvalidEndpoint(format!("unknown endpoint kind {s:?}")))
    }
}

/// Mutable draw state of a stochastic mock, shared by clones of the
/// endpoint so that every worker sees one serialized sequence.
#[derive(Debug, Default)]
pub(crate) struct MockCursor {
    pub(crate) calls: u64,
    pub(crate) rng: Option<crate::rng::XorShift64Star>,
    pub(crate) schedule: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderEndpoint {
    pub name: String,
    pub kind: EndpointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    pub model_id: String,
    /// Name of the environment variable holding the API token. The token
    /// itself is read at call time and never stored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential_env: Option<String>,
    #[serde(default)]
    pub api_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project_id: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockSpec>,
    #[serde(skip)]
    pub(crate) cursor: Arc<Mutex<MockCursor>>,
}

fn default_timeout_ms() -> u64 {
    DEFAULT_TIMEOUT_MS
}

impl PartialEq for ProviderEndpoint {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.kind == other.kind
            && self.base_url == other.base_url
            && self.model_id == other.model_id
            && self.credential_env == other.credential_env
            && self.api_version == other.api_version
            && self.project_id == other.project_id
            && self.timeout_ms == other.timeout_ms
            && self.mock == other.mock
    }
}

impl ProviderEndpoint {
    fn base(name: &str, kind: EndpointKind, model_id: &str) -> Self {
        Self {
            name: name.to_string(),
            kind,
            base_url: None,
            model_id: model_id.to_string(),
            credential_env: None,
            api_version: String::new(),
            project_id: None,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            mock: None,
            cursor: Arc::default(),
        }
    }

    pub fn ollama(name: &str, base_url: &str, model_id: &str) -> Self {
        let mut e = Self::base(name, EndpointKind::OllamaCompatible, model_id);
        e.base_url = Some(base_url.trim_end_matches('/').to_string());
        e
    }

    pub fn watsonx(name: &str, base_url: &str, model_id: &str, credential_env: &str, api_version: &str) -> Self {
        let mut e = Self::base(name, EndpointKind::WatsonxStyle, model_id);
        e.base_url = Some(base_url.trim_end_matches('/').to_string());
        e.credential_env = Some(credential_env.to_string());
        e.api_version = api_version.to_string();
        e
    }

    /// Deterministic mock answering every bundled case with a fixed,
    /// task-appropriate response.
    pub fn deterministic_mock(name: &str) -> Self {
        Self::mock_replay(name, Vec::new(), true)
    }

    pub fn mock_replay(name: &str, entries: Vec<ReplayEntry>, canned_fallback: bool) -> Self {
        let mut e = Self::base(name, EndpointKind::MockReplay, "mock-deterministic");
        e.mock = Some(MockSpec::Replay {
            entries,
            canned_fallback,
        });
        e
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.kind.is_network() {
            match &self.base_url {
                Some(u) if u.starts_with("http://") || u.starts_with("https://") => {}
                Some(u) => return Err(ProviderError::InvalidEndpoint(format!("{}: bad base_url {u:?}", self.name))),
                None => return Err(ProviderError::InvalidEndpoint(format!("{}: base_url required", self.name))),
            }
        } else {
            let spec = self
                .mock
                .as_ref()
                .ok_or_else(|| ProviderError::InvalidMock(format!("{}: mock spec missing", self.name)))?;
            spec.validate(self.kind)?;
        }
        if self.timeout_ms == 0 {
            return Err(ProviderError::InvalidEndpoint(format!("{}: timeout must be positive", self.name)));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    /// Drops mock draw state so the next call starts the schedule afresh.
    pub fn reset(&self) {
        *self.cursor.lock().unwrap_or_else(|p| p.into_inner()) = MockCursor::default();
    }

    /// Independent copy with its own draw state.
    pub fn fresh(&self) -> Self {
        let mut e = self.clone();
        e.cursor = Arc::default();
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub input_tokens: Option<u64>,
    pub generated_tokens: Option<u64>,
    pub latency_ms: f64,
    #[serde(default)]
    pub provider_meta: BTreeMap<String, serde_json::Value>,
}

/// Calls the endpoint once. Output is returned verbatim.
pub fn generate(endpoint: &ProviderEndpoint, prompt: &str, config: &DecodingConfig) -> Result<GenerationResult, ProviderError> {
    config.validate()?;
    if prompt.is_empty() {
        return Err(ProviderError::EmptyPrompt);
    }
    endpoint.validate()?;
    let started = Instant::now();
    let mut result = match endpoint.kind {
        EndpointKind::OllamaCompatible => http::ollama_generate(endpoint, prompt, config)?,
        EndpointKind::WatsonxStyle => http::watsonx_generate(endpoint, prompt, config)?,
        EndpointKind::MockReplay | EndpointKind::MockStochastic => mock::mock_generate(endpoint, prompt, config)?,
    };
    result.latency_ms = started.elapsed().as_secs_f64() * 1000.0;
    Ok(result)
}

/// `generate` with up to `max_retries` further attempts after transport
/// failures. `on_retry` sees each failed attempt before it is retried.
pub fn generate_with_retry<F>(
    endpoint: &ProviderEndpoint,
    prompt: &str,
    config: &DecodingConfig,
    max_retries: u32,
    mut on_retry: F,
) -> Result<GenerationResult, ProviderError>
where
    F: FnMut(u32, &ProviderError),
{
    let mut attempt = 0;
    loop {
        match generate(endpoint, prompt, config) {
            Err(e) if e.is_transport() && attempt < max_retries => {
                attempt += 1;
                log::warn!("{}: attempt {attempt} failed, retrying: {e}", endpoint.name);
                on_retry(attempt, &e);
            }
            other => return other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentManifest {
    pub manifest_id: String,
    pub harness_version: String,
    pub os_name_version: String,
    pub provider_kind: EndpointKind,
    pub model_id: String,
    pub provider_api_version: String,
    pub model_digest: String,
    pub corpus_version_id: String,
    pub config_hash: String,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn os_name_version() -> String {
    let kernel = fs::read_to_string("/proc/sys/kernel/osrelease")
        .map(|s| s.trim().to_string())
        .unwrap_or_default();
    let mut s = format!("{} {}", std::env::consts::OS, std::env::consts::ARCH);
    if !kernel.is_empty() {
        s.push(' ');
        s.push_str(&kernel);
    }
    s
}

pub fn capture_manifest(endpoint: &ProviderEndpoint, corpus_version: &str, full_config: &[u8]) -> EnvironmentManifest {
    let mut warnings = Vec::new();
    let model_digest = match endpoint.kind {
        EndpointKind::MockReplay | EndpointKind::MockStochastic => format!("mock:{}", endpoint.kind),
        EndpointKind::OllamaCompatible => match http::ollama_model_digest(endpoint) {
            Ok(d) => d,
            Err(e) => {
                warnings.push(format!("model digest unavailable: {e}"));
                "unknown".to_string()
            }
        },
        EndpointKind::WatsonxStyle => {
            warnings.push("model digest unavailable: provider does not expose weights digests".into());
            "unknown".to_string()
        }
    };
    for w in &warnings {
        log::warn!("{}: {w}", endpoint.name);
    }
    let config_hash = sha256_hex(full_config);
    let harness_version = HARNESS_VERSION.to_string();
    let os = os_name_version();
    let manifest_id = sha256_hex(
        [
            harness_version.as_str(),
            os.as_str(),
            endpoint.kind.as_str(),
            endpoint.model_id.as_str(),
            endpoint.api_version.as_str(),
            model_digest.as_str(),
            corpus_version,
            config_hash.as_str(),
        ]
        .join("\u{1f}"),
    )[..16]
        .to_string();
    EnvironmentManifest {
        manifest_id,
        harness_version,
        os_name_version: os,
        provider_kind: endpoint.kind,
        model_id: endpoint.model_id.clone(),
        provider_api_version: endpoint.api_version.clone(),
        model_digest,
        corpus_version_id: corpus_version.to_string(),
        config_hash,
        created_at: Utc::now(),
        warnings,
    }
}

impl EnvironmentManifest {
    pub fn file_name(&self) -> String {
        format!("{}.json", self.manifest_id)
    }

    /// Writes `dir/<manifest_id>.json` once; an existing manifest with the
    /// same id is left untouched.
    pub fn write_once(&self, dir: &Path) -> Result<PathBuf, ProviderError> {
        let io = |path: &Path, source| ProviderError::Io {
            path: path.to_path_buf(),
            source,
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let path = dir.join(self.file_name());
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let mut body = serde_json::to_vec_pretty(self).expect("manifest serializes");
                body.push(b'\n');
                f.write_all(&body).map_err(|e| io(&path, e))?;
                Ok(path)
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Ok(path),
            Err(e) => Err(io(&path, e)),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = fs::read_to_string(path).map_err(|source| ProviderError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ProviderError::MalformedResponse(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        assert!(DecodingConfig::greedy(42).validate().is_ok());
        assert!(DecodingConfig::for_temperature(0.2, 42).validate().is_ok());
        let mut c = DecodingConfig::for_temperature(0.2, 42);
        c.decoding_method = DecodingMethod::Greedy;
        assert!(matches!(c.validate(), Err(ProviderError::InvalidConfig(_))));
        let mut c = DecodingConfig::greedy(1);
        c.decoding_method = DecodingMethod::Sample;
        assert!(c.validate().is_err());
        let mut c = DecodingConfig::greedy(1);
        c.max_new_tokens = 0;
        assert!(c.validate().is_err());
        assert!(DecodingConfig::for_temperature(1.5, 1).validate().is_err());
    }

    #[test]
    fn greedy_with_temperature_rejected_before_call() {
        // unroutable address: a network attempt would surface as Unreachable
        let ep = ProviderEndpoint::ollama("x", "http://127.0.0.1:9", "m");
        let mut c = DecodingConfig::for_temperature(0.2, 42);
        c.decoding_method = DecodingMethod::Greedy;
        assert!(matches!(generate(&ep, "hi", &c), Err(ProviderError::InvalidConfig(_))));
    }

    #[test]
    fn network_kinds_need_base_url() {
        let mut ep = ProviderEndpoint::ollama("x", "http://localhost:11434", "m");
        assert!(ep.validate().is_ok());
        ep.base_url = None;
        assert!(ep.validate().is_err());
    }

    #[test]
    fn manifest_hashing() {
        let ep = ProviderEndpoint::deterministic_mock("mock");
        let a = capture_manifest(&ep, "v1", br#"{"temperature":0.0}"#);
        let b = capture_manifest(&ep, "v1", br#"{"temperature":0.0}"#);
        let c = capture_manifest(&ep, "v1", br#"{"temperature":0.2}"#);
        assert_eq!(a.config_hash, b.config_hash);
        assert_eq!(a.manifest_id, b.manifest_id);
        assert_ne!(a.config_hash, c.config_hash);
        assert_eq!(a.model_digest, "mock:mock_replay");
        let mut b2 = b.clone();
        b2.created_at = a.created_at;
        assert_eq!(a, b2);
    }

    #[test]
    fn unreachable_ollama_digest_is_unknown() {
        let ep = ProviderEndpoint::ollama("x", "http://127.0.0.1:9", "m");
        let m = capture_manifest(&ep, "v1", b"{}");
        assert_eq!(m.model_digest, "unknown");
        assert!(!m.warnings.is_empty());
    }

    #[test]
    fn manifest_written_once() {
        let dir = tempfile::tempdir().unwrap();
        let ep = ProviderEndpoint::deterministic_mock("mock");
        let m = capture_manifest(&ep, "v1", b"{}");
        let p = m.write_once(dir.path()).unwrap();
        let before = fs::read(&p).unwrap();
        let mut later = m.clone();
        later.created_at = Utc::now() + chrono::Duration::days(1);
        later.write_once(dir.path()).unwrap();
        assert_eq!(fs::read(&p).unwrap(), before);
        assert_eq!(EnvironmentManifest::load(&p).unwrap(), m);
    }

    #[test]
    fn retries_only_transport() {
        let ep = ProviderEndpoint::ollama("x", "http://127.0.0.1:9", "m");
        let mut seen = Vec::new();
        let r = generate_with_retry(&ep, "p", &DecodingConfig::greedy(1), MAX_RETRIES, |n, _| seen.push(n));
        assert!(matches!(r, Err(ProviderError::ProviderUnreachable(_))));
        assert_eq!(seen, vec![1, 2]);
    }
}
