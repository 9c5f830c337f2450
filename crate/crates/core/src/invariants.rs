//! Task acceptance gates: JSON policy, SQL execution against the fixture,
//! citation validation and decision extraction.
//!
//! Violation codes are a stable contract; they serialize as
//! SCREAMING_SNAKE_CASE strings (`JSON_PARSE`, `NON_SELECT`, ...).

use std::str::FromStr;
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, ErrorCode};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::metrics::{extract_citations, CitationSet, Decision};
use crate::tasks::{open_read_only, FixtureDB, TaskError, COMPLIANCE_DISCLAIMER};

pub const DEFAULT_SQL_TOLERANCE: f64 = 0.05;
pub const DEFAULT_SQL_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum InvariantError {
    #[error("fixture content changed: expected {expected}, found {actual}")]
    FixtureTampered { expected: String, actual: String },
    #[error("query exceeded {0:?}")]
    QueryTimeout(Duration),
    #[error("positive and negative markers overlap: {0}")]
    InvalidMarkers(String),
    #[error("oracle query failed: {0}")]
    OracleFailed(String),
    #[error(transparent)]
    Task(TaskError),
}

impl From<TaskError> for InvariantError {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::FixtureTampered { expected, actual } => InvariantError::FixtureTampered { expected, actual },
            other => InvariantError::Task(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    JsonParse,
    MissingField,
    TypeMismatch,
    DisclaimerMismatch,
    ExtraField,
    NonSelect,
    NonScalar,
    SqlError,
    ToleranceExceeded,
    NoCitation,
    UnknownCitation,
}

impl ViolationCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViolationCode::JsonParse => "JSON_PARSE",
            ViolationCode::MissingField => "MISSING_FIELD",
            ViolationCode::TypeMismatch => "TYPE_MISMATCH",
            ViolationCode::DisclaimerMismatch => "DISCLAIMER_MISMATCH",
            ViolationCode::ExtraField => "EXTRA_FIELD",
            ViolationCode::NonSelect => "NON_SELECT",
            ViolationCode::NonScalar => "NON_SCALAR",
            ViolationCode::SqlError => "SQL_ERROR",
            ViolationCode::ToleranceExceeded => "TOLERANCE_EXCEEDED",
            ViolationCode::NoCitation => "NO_CITATION",
            ViolationCode::UnknownCitation => "UNKNOWN_CITATION",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
}

impl Violation {
    pub fn new(code: ViolationCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantVerdict {
    pub passed: bool,
    pub violations: Vec<Violation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_value: Option<Decimal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_value: Option<Decimal>,
}

impl InvariantVerdict {
    pub fn pass() -> Self {
        Self::from_violations(Vec::new())
    }

    pub fn fail(violations: Vec<Violation>) -> Self {
        Self::from_violations(violations)
    }

    /// `passed` is derived: it holds exactly when there are no violations.
    pub fn from_violations(violations: Vec<Violation>) -> Self {
        Self {
            passed: violations.is_empty(),
            violations,
            observed_value: None,
            expected_value: None,
        }
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }

    pub fn codes(&self) -> Vec<ViolationCode> {
        self.violations.iter().map(|v| v.code).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonPolicyConfig {
    pub required_fields: Vec<String>,
    pub disclaimer_template: String,
    #[serde(default = "default_disclaimer_field")]
    pub disclaimer_field: String,
    #[serde(default = "default_true")]
    pub allow_extra_fields: bool,
}

fn default_disclaimer_field() -> String {
    "compliance_disclaimer".to_string()
}

fn default_true() -> bool {
    true
}

impl Default for JsonPolicyConfig {
    fn default() -> Self {
        Self {
            required_fields: vec!["client_name".into(), "summary".into(), "compliance_disclaimer".into()],
            disclaimer_template: COMPLIANCE_DISCLAIMER.to_string(),
            disclaimer_field: default_disclaimer_field(),
            allow_extra_fields: true,
        }
    }
}

/// Byte ranges of balanced `{...}` blocks, skipping braces inside strings.
fn balanced_blocks(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut blocks = Vec::new();
    for (start, &b) in bytes.iter().enumerate() {
        if b != b'{' {
            continue;
        }
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        for (off, &c) in bytes[start..].iter().enumerate() {
            if in_string {
                match c {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_string = false,
                    _ => {}
                }
                continue;
            }
            match c {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        blocks.push((start, start + off + 1));
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    blocks
}

/// Whole text as JSON first, otherwise the largest balanced block that parses.
fn parse_embedded_json(text: &str) -> Option<Value> {
    if let Ok(v) = serde_json::from_str::<Value>(text.trim()) {
        return Some(v);
    }
    let mut blocks = balanced_blocks(text);
    blocks.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)));
    blocks
        .into_iter()
        .find_map(|(s, e)| serde_json::from_str::<Value>(&text[s..e]).ok())
}

pub fn check_json_policy(text: &str, config: &JsonPolicyConfig) -> InvariantVerdict {
    let Some(value) = parse_embedded_json(text) else {
        return InvariantVerdict::fail(vec![Violation::new(ViolationCode::JsonParse, "no parseable JSON object")]);
    };
    let Value::Object(map) = value else {
        return InvariantVerdict::fail(vec![Violation::new(
            ViolationCode::JsonParse,
            "top-level JSON value is not an object",
        )]);
    };

    let mut violations = Vec::new();
    for field in &config.required_fields {
        match map.get(field) {
            None => violations.push(Violation::new(ViolationCode::MissingField, format!("missing {field}"))),
            Some(Value::String(_)) => {}
            Some(other) => violations.push(Violation::new(
                ViolationCode::TypeMismatch,
                format!("{field} must be a string, found {}", json_type(other)),
            )),
        }
    }
    if let Some(Value::String(disclaimer)) = map.get(&config.disclaimer_field) {
        if disclaimer.as_bytes() != config.disclaimer_template.as_bytes() {
            violations.push(Violation::new(
                ViolationCode::DisclaimerMismatch,
                format!("{} differs from the required template", config.disclaimer_field),
            ));
        }
    }
    if !config.allow_extra_fields {
        for key in map.keys() {
            if !config.required_fields.contains(key) {
                violations.push(Violation::new(ViolationCode::ExtraField, format!("unexpected field {key}")));
            }
        }
    }
    InvariantVerdict::from_violations(violations)
}

fn json_type(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlInvariantConfig {
    pub fixture: FixtureDB,
    pub oracle_query: String,
    pub tolerance: f64,
    #[serde(default = "default_timeout")]
    pub timeout: Duration,
}

fn default_timeout() -> Duration {
    DEFAULT_SQL_TIMEOUT
}

impl SqlInvariantConfig {
    pub fn new(fixture: FixtureDB, oracle_query: impl Into<String>) -> Self {
        Self {
            fixture,
            oracle_query: oracle_query.into(),
            tolerance: DEFAULT_SQL_TOLERANCE,
            timeout: DEFAULT_SQL_TIMEOUT,
        }
    }
}

/// Removes `--` and `/* */` comments outside single-quoted literals.
fn strip_sql_comments(sql: &str) -> String {
    let mut out = String::with_capacity(sql.len());
    let mut chars = sql.chars().peekable();
    let mut in_quote = false;
    while let Some(c) = chars.next() {
        if in_quote {
            out.push(c);
            if c == '\'' {
                in_quote = false;
            }
            continue;
        }
        match (c, chars.peek()) {
            ('\'', _) => {
                in_quote = true;
                out.push(c);
            }
            ('-', Some('-')) => {
                for n in chars.by_ref() {
                    if n == '\n' {
                        out.push('\n');
                        break;
                    }
                }
            }
            ('/', Some('*')) => {
                chars.next();
                let mut prev = '\0';
                for n in chars.by_ref() {
                    if prev == '*' && n == '/' {
                        break;
                    }
                    prev = n;
                }
                out.push(' ');
            }
            _ => out.push(c),
        }
    }
    out
}

/// Content of the first fenced code block if there is one, else the text.
fn unfence(text: &str) -> &str {
    let Some(open) = text.find("```") else {
        return text;
    };
    let after = &text[open + 3..];
    // drop an info string such as "sql"
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let body = &after[body_start..];
    match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    }
}

fn semicolon_outside_quotes(sql: &str) -> bool {
    let mut in_quote = false;
    for c in sql.chars() {
        match c {
            '\'' => in_quote = !in_quote,
            ';' if !in_quote => return true,
            _ => {}
        }
    }
    false
}

/// Normalizes generated SQL to a single statement, or explains why it is
/// not a lone SELECT.
pub fn sql_gate(sql_text: &str) -> Result<String, Violation> {
    let stripped = strip_sql_comments(unfence(sql_text));
    let mut stmt = stripped.trim();
    if let Some(s) = stmt.strip_suffix(';') {
        stmt = s.trim_end();
    }
    if stmt.is_empty() {
        return Err(Violation::new(ViolationCode::NonSelect, "empty statement"));
    }
    if semicolon_outside_quotes(stmt) {
        return Err(Violation::new(ViolationCode::NonSelect, "more than one statement"));
    }
    let first = stmt
        .split(|c: char| c.is_whitespace() || c == '(')
        .next()
        .unwrap_or_default();
    if !first.eq_ignore_ascii_case("select") {
        return Err(Violation::new(
            ViolationCode::NonSelect,
            format!("statement starts with {first:?}, expected SELECT"),
        ));
    }
    Ok(stmt.to_string())
}

enum ScalarOutcome {
    Value(Decimal),
    Violation(Violation),
}

fn decimal_from_f64(r: f64) -> Option<Decimal> {
    Decimal::from_str(&r.to_string())
        .ok()
        .or_else(|| Decimal::from_scientific(&format!("{r:e}")).ok())
}

fn run_scalar(conn: &Connection, sql: &str, timeout: Duration) -> Result<ScalarOutcome, InvariantError> {
    let started = Instant::now();
    conn.progress_handler(1_000, Some(move || started.elapsed() > timeout));
    let interrupted = |e: &rusqlite::Error| {
        matches!(e, rusqlite::Error::SqliteFailure(f, _) if f.code == ErrorCode::OperationInterrupted)
    };
    let sql_error = |e: rusqlite::Error| Ok(ScalarOutcome::Violation(Violation::new(ViolationCode::SqlError, e.to_string())));

    let mut stmt = match conn.prepare(sql) {
        Ok(s) => s,
        Err(e) => return sql_error(e),
    };
    if !stmt.readonly() {
        return Ok(ScalarOutcome::Violation(Violation::new(
            ViolationCode::NonSelect,
            "statement is not read-only",
        )));
    }
    let mut rows = match stmt.query([]) {
        Ok(r) => r,
        Err(e) if interrupted(&e) => return Err(InvariantError::QueryTimeout(timeout)),
        Err(e) => return sql_error(e),
    };
    let row = match rows.next() {
        Ok(Some(row)) => row,
        Ok(None) => {
            return Ok(ScalarOutcome::Violation(Violation::new(ViolationCode::NonScalar, "query returned no rows")))
        }
        Err(e) if interrupted(&e) => return Err(InvariantError::QueryTimeout(timeout)),
        Err(e) => return sql_error(e),
    };
    let value = match row.get_ref(0) {
        Ok(ValueRef::Integer(i)) => Some(Decimal::from(i)),
        Ok(ValueRef::Real(r)) => decimal_from_f64(r),
        Ok(ValueRef::Text(t)) => std::str::from_utf8(t)
            .ok()
            .and_then(|s| Decimal::from_str(s.trim()).ok()),
        Ok(_) | Err(_) => None,
    };
    Ok(match value {
        Some(v) => ScalarOutcome::Value(v),
        None => ScalarOutcome::Violation(Violation::new(
            ViolationCode::NonScalar,
            "first column of first row is not numeric",
        )),
    })
}

/// Gates, executes read-only against the fixture, and compares the first
/// scalar with the oracle total under a relative tolerance.
pub fn check_sql_invariant(sql_text: &str, config: &SqlInvariantConfig) -> Result<InvariantVerdict, InvariantError> {
    config.fixture.verify()?;

    let stmt = match sql_gate(sql_text) {
        Ok(s) => s,
        Err(v) => return Ok(InvariantVerdict::fail(vec![v])),
    };

    let conn = open_read_only(&config.fixture.path)?;
    conn.pragma_update(None, "query_only", true)
        .map_err(|e| InvariantError::Task(TaskError::Sqlite(e)))?;

    let expected = match run_scalar(&conn, &config.oracle_query, config.timeout)? {
        ScalarOutcome::Value(v) => v,
        ScalarOutcome::Violation(v) => return Err(InvariantError::OracleFailed(v.message)),
    };
    let observed = match run_scalar(&conn, &stmt, config.timeout)? {
        ScalarOutcome::Value(v) => v,
        ScalarOutcome::Violation(v) => {
            let mut verdict = InvariantVerdict::fail(vec![v]);
            verdict.expected_value = Some(expected);
            return Ok(verdict);
        }
    };

    let tiny = Decimal::new(1, 9);
    let scale = expected.abs().max(tiny);
    let relative = (observed - expected).abs() / scale;
    let tolerance = Decimal::from_str(&config.tolerance.to_string()).unwrap_or(Decimal::new(5, 2));
    let mut violations = Vec::new();
    if relative > tolerance {
        violations.push(Violation::new(
            ViolationCode::ToleranceExceeded,
            format!("observed {observed} vs expected {expected}: relative difference {relative:.6} > {tolerance}"),
        ));
    }
    let mut verdict = InvariantVerdict::from_violations(violations);
    verdict.observed_value = Some(observed);
    verdict.expected_value = Some(expected);
    Ok(verdict)
}

pub fn check_citations(text: &str, allowed: &CitationSet, require_nonempty: bool) -> InvariantVerdict {
    let found = extract_citations(text);
    let mut violations = Vec::new();
    if require_nonempty && found.is_empty() {
        violations.push(Violation::new(ViolationCode::NoCitation, "no citation tag found"));
    }
    for tag in found.iter().filter(|t| !allowed.contains(t)) {
        violations.push(Violation::new(ViolationCode::UnknownCitation, format!("[{tag}] is not an allowed source")));
    }
    InvariantVerdict::from_violations(violations)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionMarkers {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

fn contains_word(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    haystack.match_indices(needle).any(|(i, _)| {
        let before = haystack[..i].chars().next_back();
        let after = haystack[i + needle.len()..].chars().next();
        !before.is_some_and(is_word) && !after.is_some_and(is_word)
    })
}

/// Positive or negative when exactly one marker list matches
/// (case-insensitive, whole words); `None` when neither or both do.
pub fn extract_decision(text: &str, markers: &DecisionMarkers) -> Result<Option<Decision>, InvariantError> {
    let pos: Vec<String> = markers.positive.iter().map(|m| m.to_lowercase()).collect();
    let neg: Vec<String> = markers.negative.iter().map(|m| m.to_lowercase()).collect();
    if let Some(shared) = pos.iter().find(|p| neg.contains(p)) {
        return Err(InvariantError::InvalidMarkers(shared.clone()));
    }
    let lowered = text.to_lowercase();
    let hit = |list: &[String]| list.iter().any(|m| contains_word(&lowered, m));
    Ok(match (hit(&pos), hit(&neg)) {
        (true, false) => Some(Decision::Positive),
        (false, true) => Some(Decision::Negative),
        _ => None,
    })
}
