//! Report bundle: per-condition statistics, tiers, pairwise Fisher tests,
//! rendered as CSV and a fixed-width text table.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunnerError;
use crate::attestation::{RunStatus, TraceRecord};
use crate::metrics::{aggregate_condition_with, fisher_exact_2x2, modal_index, AggregateOptions, ConditionStats, RunOutput};
use crate::tasks::TaskId;

pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionKey {
    pub model: String,
    pub model_id: String,
    pub task: TaskId,
    pub case_id: String,
    pub seed: u64,
    pub temperature: f64,
    pub concurrency: u32,
}

impl ConditionKey {
    pub fn of(r: &TraceRecord) -> Self {
        Self {
            model: r.endpoint_name.clone(),
            model_id: r.model_id.clone(),
            task: r.task_id,
            case_id: r.case_id.clone(),
            seed: r.decoding.seed,
            temperature: r.decoding.temperature,
            concurrency: r.concurrency,
        }
    }

    fn sort_cmp(&self, other: &Self) -> Ordering {
        self.model
            .cmp(&other.model)
            .then(self.task.as_str().cmp(other.task.as_str()))
            .then(self.case_id.cmp(&other.case_id))
            .then(self.seed.cmp(&other.seed))
            .then(self.temperature.total_cmp(&other.temperature))
            .then(self.concurrency.cmp(&other.concurrency))
    }

    /// Same task, case, temperature and concurrency (model may differ).
    pub fn comparable(&self, other: &Self) -> bool {
        self.task == other.task
            && self.case_id == other.case_id
            && self.seed == other.seed
            && self.temperature == other.temperature
            && self.concurrency == other.concurrency
    }

    pub fn label_without_seed(&self) -> String {
        format!(
            "{}/{}/{}/T={:.3}/C={}",
            self.model, self.task, self.case_id, self.temperature, self.concurrency
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub key: ConditionKey,
    pub attempted: u64,
    pub failed: u64,
    /// `None` when every run of the condition failed.
    pub stats: Option<ConditionStats>,
    pub reference_sha256: Option<String>,
}

impl ConditionRow {
    /// Aggregates the original (non-replay) runs of one condition. Failed
    /// runs are counted but excluded from the statistics.
    pub fn from_records(records: &[TraceRecord]) -> Result<Self, RunnerError> {
        let first = records
            .first()
            .ok_or_else(|| RunnerError::InvalidPlan("condition without records".into()))?;
        let key = ConditionKey::of(first);
        let ok: Vec<&TraceRecord> = records.iter().filter(|r| r.status == RunStatus::Ok).collect();
        let failed = (records.len() - ok.len()) as u64;
        if ok.is_empty() {
            return Ok(Self {
                key,
                attempted: records.len() as u64,
                failed,
                stats: None,
                reference_sha256: None,
            });
        }
        let runs: Vec<RunOutput> = ok
            .iter()
            .map(|r| RunOutput::from_text(r.response.clone(), r.latency_ms, r.generated_tokens).with_decision(r.decision))
            .collect();
        let verdicts: Vec<_> = ok.iter().map(|r| r.verdict.clone()).collect();
        let opts = AggregateOptions {
            factual_drift: key.task == TaskId::Rag,
            ..AggregateOptions::default()
        };
        let stats = aggregate_condition_with(&runs, &verdicts, &opts)?;
        let reference = modal_index(ok.iter().map(|r| r.response.as_str())).map(|i| ok[i].response_sha256.clone());
        Ok(Self {
            key,
            attempted: records.len() as u64,
            failed,
            stats: Some(stats),
            reference_sha256: reference,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierRow {
    pub model: String,
    pub temperature: f64,
    /// Lowest identity rate over the model's conditions at this temperature.
    pub consistency: f64,
    pub tier: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model_a: String,
    pub model_b: String,
    pub task: TaskId,
    pub case_id: String,
    pub seed: u64,
    pub temperature: f64,
    pub concurrency: u32,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub rows: Vec<ConditionRow>,
    pub tiers: Vec<TierRow>,
    pub comparisons: Vec<Comparison>,
}

/// Tier 1 at full consistency, tier 2 above one half, tier 3 otherwise.
pub fn classify_tier(consistency: f64) -> Result<u8, RunnerError> {
    if !(0.0..=1.0).contains(&consistency) {
        return Err(RunnerError::InvalidRate(consistency));
    }
    Ok(if consistency == 1.0 {
        1
    } else if consistency > 0.5 {
        2
    } else {
        3
    })
}

/// Two-sided Fisher test on identical/non-identical counts of two models
/// under the same condition.
pub fn compare_models(a: &ConditionRow, b: &ConditionRow) -> Result<(f64, bool), RunnerError> {
    if !a.key.comparable(&b.key) {
        return Err(RunnerError::ConditionMismatch(format!(
            "{} vs {}",
            a.key.label_without_seed(),
            b.key.label_without_seed()
        )));
    }
    let (Some(sa), Some(sb)) = (&a.stats, &b.stats) else {
        return Err(RunnerError::ConditionMismatch("condition without statistics".into()));
    };
    let p = fisher_exact_2x2(
        sa.identical_count,
        sa.n - sa.identical_count,
        sb.identical_count,
        sb.n - sb.identical_count,
    )?;
    Ok((p, p < ALPHA))
}

impl ReportBundle {
    pub fn new(mut rows: Vec<ConditionRow>) -> Result<Self, RunnerError> {
        rows.sort_by(|a, b| a.key.sort_cmp(&b.key));
        if let Some(w) = rows.windows(2).find(|w| w[0].key.sort_cmp(&w[1].key) == Ordering::Equal) {
            return Err(RunnerError::InvalidPlan(format!(
                "condition {} appears twice",
                w[0].key.label_without_seed()
            )));
        }

        let mut by_model_temp: BTreeMap<(String, u64), (f64, f64)> = BTreeMap::new();
        for row in &rows {
            if let Some(s) = &row.stats {
                let k = (row.key.model.clone(), row.key.temperature.to_bits());
                let e = by_model_temp.entry(k).or_insert((row.key.temperature, 1.0));
                e.1 = e.1.min(s.identity_rate);
            }
        }
        let mut tiers = Vec::new();
        for ((model, _), (temperature, consistency)) in by_model_temp {
            tiers.push(TierRow {
                model,
                temperature,
                consistency,
                tier: classify_tier(consistency)?,
            });
        }
        tiers.sort_by(|a, b| a.model.cmp(&b.model).then(a.temperature.total_cmp(&b.temperature)));

        let mut comparisons = Vec::new();
        for (i, a) in rows.iter().enumerate() {
            for b in &rows[i + 1..] {
                if a.key.model == b.key.model || !a.key.comparable(&b.key) || a.stats.is_none() || b.stats.is_none() {
                    continue;
                }
                let (p_value, significant) = compare_models(a, b)?;
                comparisons.push(Comparison {
                    model_a: a.key.model.clone(),
                    model_b: b.key.model.clone(),
                    task: a.key.task,
                    case_id: a.key.case_id.clone(),
                    seed: a.key.seed,
                    temperature: a.key.temperature,
                    concurrency: a.key.concurrency,
                    p_value,
                    significant,
                });
            }
        }
        Ok(Self {
            rows,
            tiers,
            comparisons,
        })
    }

    /// Rebuilds a bundle from trace records, grouping original runs by
    /// condition. Replay records are ignored.
    pub fn from_records(records: &[TraceRecord]) -> Result<Self, RunnerError> {
        let mut groups: Vec<(ConditionKey, Vec<TraceRecord>)> = Vec::new();
        for r in records.iter().filter(|r| r.replay_of.is_none()) {
            let key = ConditionKey::of(r);
            match groups.iter_mut().find(|(k, _)| k.sort_cmp(&key) == Ordering::Equal) {
                Some((_, v)) => v.push(r.clone()),
                None => groups.push((key, vec![r.clone()])),
            }
        }
        let rows = groups
            .iter()
            .map(|(_, recs)| ConditionRow::from_records(recs))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(rows)
    }
}

fn fmt3(x: f64) -> String {
    format!("{x:.3}")
}

pub const CSV_HEADER: &str =
    "model,task,case,seed,temp,concurrency,n,identical_pct,mean_drift,mean_latency_s,wilson_low,wilson_high";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_csv(bundle: &ReportBundle) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in &bundle.rows {
        let k = &row.key;
        let stat_cells = match &row.stats {
            Some(s) => [
                s.n.to_string(),
                fmt3(s.identity_rate * 100.0),
                fmt3(s.mean_drift),
                fmt3(s.mean_latency_ms / 1000.0),
                fmt3(s.wilson_low),
                fmt3(s.wilson_high),
            ],
            None => ["0".into(), String::new(), String::new(), String::new(), String::new(), String::new()],
        };
        let cells = [
            csv_field(&k.model),
            k.task.to_string(),
            csv_field(&k.case_id),
            k.seed.to_string(),
            fmt3(k.temperature),
            k.concurrency.to_string(),
        ];
        out.push_str(&cells.join(","));
        out.push(',');
        out.push_str(&stat_cells.join(","));
        out.push('\n');
    }
    out
}

fn table(header: &[&str], rows: &[Vec<String>], right_from: usize) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i >= right_from { format!("{c:>w$}") } else { format!("{c:<w$}") })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&(rule.join("  ") + "\n"));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

pub fn render_text(bundle: &ReportBundle) -> String {
    let rows: Vec<Vec<String>> = bundle
        .rows
        .iter()
        .map(|row| {
            let k = &row.key;
            let mut cells = vec![
                k.model.clone(),
                k.task.to_string(),
                k.case_id.clone(),
                fmt3(k.temperature),
                k.concurrency.to_string(),
            ];
            match &row.stats {
                Some(s) => cells.extend([
                    fmt3(s.identity_rate * 100.0),
                    fmt3(s.mean_drift),
                    fmt3(s.mean_latency_ms / 1000.0),
                    format!("[{}, {}]", fmt3(s.wilson_low), fmt3(s.wilson_high)),
                    format!("{}/{}", s.n, row.attempted),
                ]),
                None => cells.extend([
                    "-".into(),
                    "-".into(),
                    "-".into(),
                    "-".into(),
                    format!("0/{}", row.attempted),
                ]),
            }
            cells
        })
        .collect();
    let mut out = String::from("All results across temperatures and concurrency\n\n");
    out.push_str(&table(
        &["Model", "Task", "Case", "Temp", "Conc.", "Identical (%)", "Mean drift", "Lat. (s)", "95% Wilson CI", "n/runs"],
        &rows,
        3,
    ));

    let tiers: Vec<Vec<String>> = bundle
        .tiers
        .iter()
        .map(|t| vec![t.model.clone(), fmt3(t.temperature), fmt3(t.consistency * 100.0), format!("Tier {}", t.tier)])
        .collect();
    out.push_str("\nTiers\n\n");
    out.push_str(&table(&["Model", "Temp", "Consistency (%)", "Tier"], &tiers, 1));

    if !bundle.comparisons.is_empty() {
        let cmp: Vec<Vec<String>> = bundle
            .comparisons
            .iter()
            .map(|c| {
                vec![
                    c.model_a.clone(),
                    c.model_b.clone(),
                    c.task.to_string(),
                    fmt3(c.temperature),
                    c.concurrency.to_string(),
                    format!("{:.3e}", c.p_value),
                    if c.significant { "yes" } else { "no" }.to_string(),
                ]
            })
            .collect();
        out.push_str("\nPairwise Fisher exact tests (alpha = 0.05)\n\n");
        out.push_str(&table(&["Model A", "Model B", "Task", "Temp", "Conc.", "p", "Significant"], &cmp, 3));
    }
    out
}

/// Writes `conditions.csv`, `report.txt` and `bundle.json` into `dir`.
/// Output bytes depend only on the bundle.
pub fn emit_report(bundle: &ReportBundle, dir: &Path) -> Result<Vec<PathBuf>, RunnerError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| RunnerError::IoFailure { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut json = serde_json::to_string_pretty(bundle).expect("bundle serializes");
    json.push('\n');
    let files = [
        ("conditions.csv", render_csv(bundle)),
        ("report.txt", render_text(bundle)),
        ("bundle.json", json),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, identical: u64, n: u64) -> ConditionRow {
        let rate = identical as f64 / n as f64;
        let (lo, hi) = crate::metrics::wilson_ci(identical, n, 0.95).unwrap();
        ConditionRow {
            key: ConditionKey {
                model: model.into(),
                model_id: model.into(),
                task: TaskId::Rag,
                case_id: "c".into(),
                seed: 42,
                temperature: 0.2,
                concurrency: 1,
            },
            attempted: n,
            failed: 0,
            stats: Some(ConditionStats {
                n,
                identical_count: identical,
                identity_rate: rate,
                wilson_low: lo,
                wilson_high: hi,
                mean_drift: 0.311,
                factual_drift_rate: Some(0.0),
                schema_violation_rate: 0.0,
                decision_flip_rate: 0.0,
                mean_latency_ms: 3209.0,
                tokens_per_sec: None,
            }),
            reference_sha256: None,
        }
    }

    #[test]
    fn tiers() {
        assert_eq!(classify_tier(1.0).unwrap(), 1);
        assert_eq!(classify_tier(0.75).unwrap(), 2);
        assert_eq!(classify_tier(0.5).unwrap(), 3);
        assert_eq!(classify_tier(0.125).unwrap(), 3);
        assert_eq!(classify_tier(0.0).unwrap(), 3);
        assert!(matches!(classify_tier(1.01), Err(RunnerError::InvalidRate(_))));
        assert!(classify_tier(-0.1).is_err());
        assert!(classify_tier(f64::NAN).is_err());
    }

    #[test]
    fn comparisons() {
        let (p, sig) = compare_models(&row("a", 16, 16), &row("b", 2, 16)).unwrap();
        assert!(p < 1e-4 && sig);
        let (p, sig) = compare_models(&row("a", 16, 16), &row("b", 16, 16)).unwrap();
        assert_eq!(p, 1.0);
        assert!(!sig);
        let mut other = row("b", 16, 16);
        other.key.temperature = 0.0;
        assert!(matches!(
            compare_models(&row("a", 16, 16), &other),
            Err(RunnerError::ConditionMismatch(_))
        ));
    }

    #[test]
    fn csv_cells_and_determinism() {
        let bundle = ReportBundle::new(vec![row("b", 9, 16), row("a", 16, 16)]).unwrap();
        let csv = render_csv(&bundle);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "a,rag,c,42,0.200,1,16,100.000,0.311,3.209,0.806,1.000");
        assert_eq!(lines[2], "b,rag,c,42,0.200,1,16,56.250,0.311,3.209,0.332,0.769");
        assert_eq!(bundle.tiers.len(), 2);
        assert_eq!(bundle.tiers[1].tier, 2);
        assert_eq!(bundle.comparisons.len(), 1);

        let dir = tempfile::tempdir().unwrap();
        let first: Vec<Vec<u8>> = emit_report(&bundle, dir.path()).unwrap().iter().map(|p| fs::read(p).unwrap()).collect();
        let again: Vec<Vec<u8>> = emit_report(&bundle, dir.path()).unwrap().iter().map(|p| fs::read(p).unwrap()).collect();
        assert_eq!(first, again);
        let text = String::from_utf8(first[1].clone()).unwrap();
        assert!(text.contains("56.250"));
    }

    #[test]
    fn duplicate_condition_rejected() {
        assert!(ReportBundle::new(vec![row("a", 1, 2), row("a", 1, 2)]).is_err());
    }
}
