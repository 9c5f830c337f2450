//! Protocol tasks, versioned prompt templates and the SQL fixture.

mod fixture;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::invariants::{DecisionMarkers, JsonPolicyConfig};
use crate::metrics::CitationSet;

pub use fixture::{
    canonical_dump, fixture_content_hash, generate_fixture_db, open_read_only, FixtureDB, ACCOUNT_COUNT,
    DEFAULT_ROWS, FIRST_DATE, LAST_DATE, REGIONS, SCHEMA_VERSION,
};

/// Disclaimer the summary task must reproduce byte for byte.
pub const COMPLIANCE_DISCLAIMER: &str = "This communication is provided for informational purposes only and does not constitute investment, legal, or tax advice. Past performance is not indicative of future results.";

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unbound placeholder {{{0}}}")]
    UnboundPlaceholder(String),
    #[error("template {version} changed: recorded sha256 {expected}, actual {actual}")]
    TemplateTampered {
        version: String,
        expected: String,
        actual: String,
    },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("case {case_id} is invalid: {reason}")]
    InvalidCase { case_id: String, reason: String },
    #[error("row count must be at least 1")]
    InvalidRowCount,
    #[error("fixture content changed: expected {expected}, found {actual}")]
    FixtureTampered { expected: String, actual: String },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("sqlite: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("malformed task catalog: {0}")]
    Json(#[from] serde_json::Error),
}

impl TaskError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TaskError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Rag,
    Sql,
    Summary,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Rag, TaskId::Sql, TaskId::Summary];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskId::Rag => "rag",
            TaskId::Sql => "sql",
            TaskId::Summary => "summary",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rag" => Ok(TaskId::Rag),
            "sql" => Ok(TaskId::Sql),
            "summary" => Ok(TaskId::Summary),
            other => Err(TaskError::UnknownTask(other.to_string())),
        }
    }
}

/// Per-task checker settings. The SQL fixture itself is supplied at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InvariantConfig {
    Citations { require_nonempty: bool },
    JsonPolicy(JsonPolicyConfig),
    Sql { tolerance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub template_version: String,
    /// Digest recorded when the template version was published.
    pub template_sha256: String,
    pub template: String,
    pub invariant_config: InvariantConfig,
}

impl TaskSpec {
    pub fn verify_template(&self) -> Result<(), TaskError> {
        let actual = sha256_hex(&self.template);
        if actual != self.template_sha256 {
            return Err(TaskError::TemplateTampered {
                version: self.template_version.clone(),
                expected: self.template_sha256.clone(),
                actual,
            });
        }
        Ok(())
    }

    pub fn placeholders(&self) -> Vec<String> {
        placeholder_re()
            .captures_iter(&self.template)
            .map(|c| c[1].to_string())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCase {
    pub case_id: String,
    pub task_id: TaskId,
    pub bindings: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_citation_universe: Option<CitationSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_markers: Option<DecisionMarkers>,
}

impl TaskCase {
    pub fn with_binding(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.bindings.insert(name.into(), value.into());
        self
    }

    /// The text retrieval should run against (rag cases).
    pub fn question(&self) -> Option<&str> {
        self.bindings.get("question").map(String::as_str)
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_][a-z0-9_]*)\}").unwrap())
}

/// Substitutes every `{name}` in the template from the case bindings.
/// Substituted values are not rescanned.
pub fn render_prompt(spec: &TaskSpec, case: &TaskCase) -> Result<String, TaskError> {
    spec.verify_template()?;
    let mut out = String::with_capacity(spec.template.len() + 256);
    let mut last = 0;
    for caps in placeholder_re().captures_iter(&spec.template) {
        let m = caps.get(0).unwrap();
        let name = &caps[1];
        let value = case
            .bindings
            .get(name)
            .ok_or_else(|| TaskError::UnboundPlaceholder(name.to_string()))?;
        out.push_str(&spec.template[last..m.start()]);
        out.push_str(value);
        last = m.end();
    }
    out.push_str(&spec.template[last..]);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCatalog {
    pub catalog_version: String,
    pub tasks: Vec<TaskSpec>,
    pub cases: Vec<TaskCase>,
}

const BUNDLED_CATALOG: &str = include_str!("../../fixtures/tasks.json");

impl TaskCatalog {
    pub fn bundled() -> Self {
        let catalog: TaskCatalog = serde_json::from_str(BUNDLED_CATALOG).expect("bundled task catalog parses");
        catalog.validate().expect("bundled task catalog is valid");
        catalog
    }

    pub fn load(path: &Path) -> Result<Self, TaskError> {
        let raw = std::fs::read_to_string(path).map_err(|e| TaskError::io(path, e))?;
        let catalog: TaskCatalog = serde_json::from_str(&raw)?;
        catalog.validate()?;
        Ok(catalog)
    }

    /// Templates match their recorded digests and rag cases carry a
    /// nonempty citation universe.
    pub fn validate(&self) -> Result<(), TaskError> {
        for spec in &self.tasks {
            spec.verify_template()?;
        }
        for case in &self.cases {
            self.spec(case.task_id)?;
            if case.task_id == TaskId::Rag
                && case.expected_citation_universe.as_ref().is_none_or(CitationSet::is_empty)
            {
                return Err(TaskError::InvalidCase {
                    case_id: case.case_id.clone(),
                    reason: "rag cases need at least one allowed citation".into(),
                });
            }
            if case.task_id == TaskId::Sql && case.oracle_query.is_none() {
                return Err(TaskError::InvalidCase {
                    case_id: case.case_id.clone(),
                    reason: "sql cases need an oracle query".into(),
                });
            }
        }
        Ok(())
    }

    pub fn spec(&self, task: TaskId) -> Result<&TaskSpec, TaskError> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task)
            .ok_or_else(|| TaskError::UnknownTask(task.to_string()))
    }

    pub fn cases(&self, task: TaskId) -> Vec<TaskCase> {
        self.cases.iter().filter(|c| c.task_id == task).cloned().collect()
    }

    pub fn case(&self, case_id: &str) -> Option<&TaskCase> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    /// First listed case of a task, used when a plan does not pick one.
    pub fn primary_case(&self, task: TaskId) -> Option<&TaskCase> {
        self.cases.iter().find(|c| c.task_id == task)
    }
}

/// The bundled case set for one task.
pub fn list_protocol_cases(task: TaskId) -> Vec<TaskCase> {
    TaskCatalog::bundled().cases(task)
}
