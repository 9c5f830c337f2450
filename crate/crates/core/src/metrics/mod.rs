//! Drift metrics: edit distance, factual drift, identity rate and
//! per-condition aggregation with Wilson intervals.

mod distance;
mod numbers;
mod stats;

use std::collections::HashMap;
use std::str::FromStr;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::invariants::InvariantVerdict;

pub use distance::{edit_distance, normalized_edit_distance};
pub use numbers::{canonicalize_numbers, extract_citations, CanonicalNumber, CitationSet};
pub use stats::{fisher_exact_2x2, wilson_ci, z_for_confidence};

/// Default materiality tolerance for numeric drift.
pub const MATERIALITY_EPSILON: f64 = 0.05;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no runs to aggregate")]
    NoRuns,
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("confidence must lie in (0, 1), got {0}")]
    InvalidConfidence(f64),
    #[error("all-zero contingency table")]
    DegenerateTable,
    #[error("{runs} runs but {verdicts} verdicts")]
    AlignmentError { runs: usize, verdicts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Negative,
    Positive,
}

/// One generation plus everything extracted from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub text: String,
    pub citations: CitationSet,
    pub numbers: Vec<CanonicalNumber>,
    pub decision: Option<Decision>,
    pub latency_ms: f64,
    pub generated_tokens: Option<u64>,
}

impl RunOutput {
    pub fn from_text(text: impl Into<String>, latency_ms: f64, generated_tokens: Option<u64>) -> Self {
        let text = text.into();
        Self {
            citations: extract_citations(&text),
            numbers: canonicalize_numbers(&text),
            decision: None,
            latency_ms,
            generated_tokens,
            text,
        }
    }

    pub fn with_decision(mut self, decision: Option<Decision>) -> Self {
        self.decision = decision;
        self
    }
}

fn epsilon_decimal(epsilon: f64) -> Decimal {
    // shortest round-trip text keeps 0.05 exact
    Decimal::from_str(&epsilon.to_string())
        .or_else(|_| Decimal::from_scientific(&format!("{epsilon:e}")))
        .expect("finite epsilon")
}

/// True when two numbers differ materially: their difference is at least
/// `epsilon` times the smaller magnitude. Equal values never differ.
pub fn numbers_differ(a: Decimal, b: Decimal, epsilon: Decimal) -> bool {
    if a == b {
        return false;
    }
    let smaller = a.abs().min(b.abs());
    (a - b).abs() >= epsilon * smaller
}

/// Citation sets differ, number lists differ in length, or any aligned
/// pair differs materially.
pub fn factual_drift(o1: &RunOutput, o2: &RunOutput, epsilon: f64) -> bool {
    assert!(epsilon > 0.0, "materiality epsilon must be positive");
    if o1.citations != o2.citations || o1.numbers.len() != o2.numbers.len() {
        return true;
    }
    let eps = epsilon_decimal(epsilon);
    o1.numbers
        .iter()
        .zip(&o2.numbers)
        .any(|(x, y)| numbers_differ(x.value, y.value, eps))
}

/// Index of the modal text; ties go to the lexicographically smallest.
pub fn modal_index<'a, I>(texts: I) -> Option<usize>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for (i, t) in texts.into_iter().enumerate() {
        counts.entry(t).or_insert((0, i)).0 += 1;
    }
    counts
        .into_iter()
        .max_by(|(ta, (ca, _)), (tb, (cb, _))| ca.cmp(cb).then_with(|| tb.cmp(ta)))
        .map(|(_, (_, first))| first)
}

/// Fraction of outputs within `epsilon` normalized edit distance of the
/// modal output, together with that reference output.
pub fn identity_rate(outputs: &[RunOutput], epsilon: f64) -> Result<(f64, &RunOutput), MetricsError> {
    let idx = modal_index(outputs.iter().map(|o| o.text.as_str())).ok_or(MetricsError::NoRuns)?;
    let reference = &outputs[idx];
    let matching = outputs
        .iter()
        .filter(|o| normalized_edit_distance(&o.text, &reference.text) <= epsilon)
        .count();
    Ok((matching as f64 / outputs.len() as f64, reference))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionStats {
    pub n: u64,
    pub identical_count: u64,
    pub identity_rate: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
    pub mean_drift: f64,
    /// `None` when factual drift is not measured for the task.
    pub factual_drift_rate: Option<f64>,
    pub schema_violation_rate: f64,
    pub decision_flip_rate: f64,
    pub mean_latency_ms: f64,
    pub tokens_per_sec: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateOptions {
    pub identity_epsilon: f64,
    pub materiality_epsilon: f64,
    pub confidence: f64,
    pub factual_drift: bool,
}

impl Default for AggregateOptions {
    fn default() -> Self {
        Self {
            identity_epsilon: 0.0,
            materiality_epsilon: MATERIALITY_EPSILON,
            confidence: 0.95,
            factual_drift: true,
        }
    }
}

pub fn aggregate_condition(runs: &[RunOutput], verdicts: &[InvariantVerdict]) -> Result<ConditionStats, MetricsError> {
    aggregate_condition_with(runs, verdicts, &AggregateOptions::default())
}

pub fn aggregate_condition_with(
    runs: &[RunOutput],
    verdicts: &[InvariantVerdict],
    opts: &AggregateOptions,
) -> Result<ConditionStats, MetricsError> {
    if runs.len() != verdicts.len() {
        return Err(MetricsError::AlignmentError {
            runs: runs.len(),
            verdicts: verdicts.len(),
        });
    }
    let (rate, reference) = identity_rate(runs, opts.identity_epsilon)?;
    let n = runs.len() as u64;
    let nf = n as f64;
    let identical_count = (rate * nf).round() as u64;
    let (wilson_low, wilson_high) = wilson_ci(identical_count, n, opts.confidence)?;

    let mean_drift = runs
        .iter()
        .map(|r| normalized_edit_distance(&r.text, &reference.text))
        .sum::<f64>()
        / nf;

    let factual_drift_rate = opts.factual_drift.then(|| {
        runs.iter()
            .filter(|r| factual_drift(r, reference, opts.materiality_epsilon))
            .count() as f64
            / nf
    });

    let schema_violation_rate = verdicts.iter().filter(|v| !v.passed).count() as f64 / nf;

    let decisions: Vec<Decision> = runs.iter().filter_map(|r| r.decision).collect();
    let decision_flip_rate = if decisions.is_empty() {
        0.0
    } else {
        let positives = decisions.iter().filter(|d| **d == Decision::Positive).count();
        let negatives = decisions.len() - positives;
        // ties favor the smaller label, matching the text tie-break
        let modal = if positives > negatives {
            Decision::Positive
        } else {
            Decision::Negative
        };
        decisions.iter().filter(|d| **d != modal).count() as f64 / decisions.len() as f64
    };

    let mean_latency_ms = runs.iter().map(|r| r.latency_ms).sum::<f64>() / nf;
    let throughputs: Vec<f64> = runs
        .iter()
        .filter_map(|r| match r.generated_tokens {
            Some(t) if r.latency_ms > 0.0 => Some(t as f64 / (r.latency_ms / 1000.0)),
            _ => None,
        })
        .collect();
    let tokens_per_sec =
        (!throughputs.is_empty()).then(|| throughputs.iter().sum::<f64>() / throughputs.len() as f64);

    Ok(ConditionStats {
        n,
        identical_count,
        identity_rate: rate,
        wilson_low,
        wilson_high,
        mean_drift,
        factual_drift_rate,
        schema_violation_rate,
        decision_flip_rate,
        mean_latency_ms,
        tokens_per_sec,
    })
}
