//! Test doubles: a replay store keyed by (prompt digest, seed) and
//! seeded stochastic mocks drawing from weighted or scripted variants.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{DecodingConfig, EndpointKind, GenerationResult, MockCursor, ProviderEndpoint, ProviderError};
use crate::digest::sha256_hex;
use crate::metrics::extract_citations;
use crate::rng::XorShift64Star;
use crate::tasks::COMPLIANCE_DISCLAIMER;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub prompt_sha256: String,
    /// `None` matches any seed.
    #[serde(default)]
    pub seed: Option<u64>,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedVariant {
    pub text: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedVariant {
    pub text: String,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MockSpec {
    /// Stored responses; unmatched prompts get the canned answer when
    /// `canned_fallback` is set and are rejected otherwise.
    Replay {
        #[serde(default)]
        entries: Vec<ReplayEntry>,
        #[serde(default)]
        canned_fallback: bool,
    },
    /// Independent weighted draws.
    Weighted { variants: Vec<WeightedVariant>, seed: u64 },
    /// Each cycle of calls returns exactly the multiset, in an order
    /// shuffled from the seed; the next cycle reshuffles.
    Scripted { script: Vec<ScriptedVariant>, seed: u64 },
}

impl MockSpec {
    pub(crate) fn validate(&self, kind: EndpointKind) -> Result<(), ProviderError> {
        let bad = |m: &str| Err(ProviderError::InvalidMock(m.to_string()));
        match (self, kind) {
            (MockSpec::Replay { .. }, EndpointKind::MockReplay) => Ok(()),
            (MockSpec::Weighted { variants, .. }, EndpointKind::MockStochastic) => {
                if variants.is_empty() {
                    return bad("no variants");
                }
                if variants.iter().any(|v| !(v.weight.is_finite() && v.weight > 0.0)) {
                    return bad("weights must be positive");
                }
                Ok(())
            }
            (MockSpec::Scripted { script, .. }, EndpointKind::MockStochastic) => {
                if script.is_empty() {
                    return bad("no variants");
                }
                if script.iter().any(|v| v.count == 0) {
                    return bad("scripted counts must be positive");
                }
                Ok(())
            }
            _ => bad("mock mode does not match endpoint kind"),
        }
    }
}

fn stochastic_endpoint(spec: MockSpec) -> Result<ProviderEndpoint, ProviderError> {
    let mut e = ProviderEndpoint::base("mock-stochastic", EndpointKind::MockStochastic, "mock-stochastic");
    spec.validate(EndpointKind::MockStochastic)?;
    e.mock = Some(spec);
    Ok(e)
}

pub fn make_stochastic_mock<S: Into<String>>(variants: Vec<(S, f64)>, seed: u64) -> Result<ProviderEndpoint, ProviderError> {
    let variants = variants
        .into_iter()
        .map(|(text, weight)| WeightedVariant {
            text: text.into(),
            weight,
        })
        .collect();
    stochastic_endpoint(MockSpec::Weighted { variants, seed })
}

pub fn make_scripted_mock<S: Into<String>>(script: Vec<(S, u32)>, seed: u64) -> Result<ProviderEndpoint, ProviderError> {
    let script = script
        .into_iter()
        .map(|(text, count)| ScriptedVariant {
            text: text.into(),
            count,
        })
        .collect();
    stochastic_endpoint(MockSpec::Scripted { script, seed })
}

fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

fn result(prompt: &str, text: String, meta: BTreeMap<String, serde_json::Value>) -> GenerationResult {
    GenerationResult {
        input_tokens: Some(word_count(prompt)),
        generated_tokens: Some(word_count(&text)),
        text,
        latency_ms: 0.0,
        provider_meta: meta,
    }
}

pub(crate) fn mock_generate(
    endpoint: &ProviderEndpoint,
    prompt: &str,
    config: &DecodingConfig,
) -> Result<GenerationResult, ProviderError> {
    let spec = endpoint
        .mock
        .as_ref()
        .ok_or_else(|| ProviderError::InvalidMock("mock spec missing".into()))?;
    match spec {
        MockSpec::Replay {
            entries,
            canned_fallback,
        } => {
            let digest = sha256_hex(prompt);
            let exact = entries
                .iter()
                .find(|e| e.prompt_sha256 == digest && e.seed == Some(config.seed));
            let any_seed = || entries.iter().find(|e| e.prompt_sha256 == digest && e.seed.is_none());
            let mut meta = BTreeMap::new();
            if let Some(hit) = exact.or_else(any_seed) {
                meta.insert("source".into(), json!("stored"));
                return Ok(result(prompt, hit.response.clone(), meta));
            }
            if *canned_fallback {
                meta.insert("source".into(), json!("canned"));
                return Ok(result(prompt, canned_response(prompt), meta));
            }
            Err(ProviderError::ProviderRejected {
                status: 404,
                body: format!("no stored response for prompt {digest} seed {}", config.seed),
            })
        }
        MockSpec::Weighted { variants, seed } => {
            let mut cur = endpoint.cursor.lock().unwrap_or_else(|p| p.into_inner());
            let call = cur.calls;
            cur.calls += 1;
            let rng = cur.rng.get_or_insert_with(|| XorShift64Star::new(*seed));
            let total: f64 = variants.iter().map(|v| v.weight).sum();
            let mut u = rng.next_f64() * total;
            let mut pick = variants.len() - 1;
            for (i, v) in variants.iter().enumerate() {
                if u < v.weight {
                    pick = i;
                    break;
                }
                u -= v.weight;
            }
            drop(cur);
            Ok(result(prompt, variants[pick].text.clone(), draw_meta(call, pick)))
        }
        MockSpec::Scripted { script, seed } => {
            let mut cur = endpoint.cursor.lock().unwrap_or_else(|p| p.into_inner());
            let cycle: usize = script.iter().map(|v| v.count as usize).sum();
            let call = cur.calls;
            cur.calls += 1;
            let pos = (call % cycle as u64) as usize;
            if pos == 0 || cur.schedule.len() != cycle {
                let MockCursor { rng, schedule, .. } = &mut *cur;
                let rng = rng.get_or_insert_with(|| XorShift64Star::new(*seed));
                *schedule = script
                    .iter()
                    .enumerate()
                    .flat_map(|(i, v)| std::iter::repeat_n(i, v.count as usize))
                    .collect();
                rng.shuffle(schedule);
            }
            let pick = cur.schedule[pos];
            drop(cur);
            Ok(result(prompt, script[pick].text.clone(), draw_meta(call, pick)))
        }
    }
}

fn draw_meta(call: u64, variant: usize) -> BTreeMap<String, serde_json::Value> {
    BTreeMap::from([
        ("call_index".to_string(), json!(call)),
        ("variant".to_string(), json!(variant)),
    ])
}

fn sql_region_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"region\s*=\s*'?(NA|EU|APAC)\b").unwrap())
}

fn sql_dates_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)between (\d{4}-\d{2}-\d{2}) and (\d{4}-\d{2}-\d{2})").unwrap())
}

/// Fixed answer for a bundled task prompt, chosen from the prompt text.
pub fn canned_response(prompt: &str) -> String {
    if let Some(rest) = prompt.split("Generate a SQL query for:").nth(1) {
        let request = rest.lines().next().unwrap_or_default();
        let mut filters = Vec::new();
        if let Some(c) = sql_region_re().captures(request) {
            filters.push(format!("region = '{}'", &c[1]));
        }
        if let Some(c) = sql_dates_re().captures(request) {
            filters.push(format!("date BETWEEN '{}' AND '{}'", &c[1], &c[2]));
        }
        return if filters.is_empty() {
            "SELECT SUM(amount) FROM transactions;".to_string()
        } else {
            format!("SELECT SUM(amount) FROM transactions WHERE {};", filters.join(" AND "))
        };
    }
    if prompt.contains("compliance_disclaimer") {
        let client = prompt
            .split("Client: ")
            .nth(1)
            .and_then(|r| r.split(". ").next())
            .unwrap_or("Client")
            .trim();
        return json!({
            "client_name": client,
            "summary": "Portfolio positioning was unchanged over the period. Allocations remain within the agreed mandate.",
            "compliance_disclaimer": COMPLIANCE_DISCLAIMER,
        })
        .to_string();
    }
    let context = prompt
        .split("Context:")
        .nth(1)
        .and_then(|r| r.split("Question:").next())
        .unwrap_or_default();
    let question = prompt.split("Question:").nth(1).unwrap_or_default().to_lowercase();
    // first tag in context order, i.e. the top-ranked excerpt
    let tag = extract_citations(context)
        .iter()
        .filter_map(|t| context.find(&format!("[{t}]")).map(|i| (i, t.to_string())))
        .min()
        .map(|(_, t)| t);
    match tag {
        Some(t) if question.contains("net credit losses") && t.starts_with("jpm") => {
            format!("JPMorgan Chase reported net credit losses of $2.9 billion in 2023 [{t}].")
        }
        Some(t) => format!("The retrieved filing addresses this in its disclosures [{t}]."),
        None => "The provided context does not contain the answer.".to_string(),
    }
}
