mod common;

use std::sync::Arc;

use driftwatch_core::attestation::{read_runs, RunStatus, TraceRecord, TraceWriter, TRACE_SCHEMA_VERSION};
use driftwatch_core::metrics::fisher_exact_2x2;
use driftwatch_core::provider::{DecodingConfig, EndpointKind};
use driftwatch_core::tasks::{generate_fixture_db, open_read_only};
use driftwatch_core::{hash_output, InvariantVerdict, TaskId};

#[test]
fn fisher_matches_enumeration() {
    let tables = [
        (16, 0, 9, 7),
        (16, 0, 16, 0),
        (8, 8, 8, 8),
        (3, 1, 1, 3),
        (1, 9, 11, 3),
        (0, 5, 5, 0),
        (12, 4, 2, 14),
        (40, 10, 25, 25),
        (480, 20, 300, 200),
        (1, 0, 0, 0),
    ];
    for (a, b, c, d) in tables {
        let got = fisher_exact_2x2(a, b, c, d).unwrap();
        let want = common::fisher_oracle(a, b, c, d);
        let rel = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
        assert!(rel < 1e-9, "({a},{b},{c},{d}) got {got} want {want}");
    }
}

#[test]
fn fixture_total_matches_direct_summation() {
    let dir = tempfile::tempdir().unwrap();
    let db = generate_fixture_db(&dir.path().join("f.sqlite"), 42, 1000).unwrap();
    let conn = open_read_only(&db.path).unwrap();
    let mut stmt = conn.prepare("SELECT amount FROM transactions").unwrap();
    let amounts: Vec<f64> = stmt.query_map([], |r| r.get(0)).unwrap().map(Result::unwrap).collect();
    assert_eq!(amounts.len(), 1000);
    let cents: i64 = amounts.iter().map(|a| (a * 100.0).round() as i64).sum();
    let sum: f64 = conn.query_row("SELECT SUM(amount) FROM transactions", [], |r| r.get(0)).unwrap();
    assert_eq!((sum * 100.0).round() as i64, cents);
    let again = generate_fixture_db(&dir.path().join("g.sqlite"), 42, 1000).unwrap();
    assert_eq!(again.content_hash, db.content_hash);
}

fn record(i: usize) -> TraceRecord {
    let t = chrono::Utc::now();
    let response = format!("response {i}\nwith ✓ unicode");
    TraceRecord {
        schema_version: TRACE_SCHEMA_VERSION.into(),
        run_id: format!("run-{i:04}"),
        replay_of: None,
        task_id: TaskId::Sql,
        case_id: "sql_total_amount".into(),
        template_version: "sql/v1".into(),
        endpoint_name: "mock".into(),
        provider_kind: EndpointKind::MockReplay,
        model_id: "mock-deterministic".into(),
        decoding: DecodingConfig::greedy(42),
        concurrency: 16,
        trial_index: i as u32,
        wave: 0,
        jitter_ms: 0.0,
        prompt: "p".into(),
        prompt_sha256: hash_output("p"),
        status: RunStatus::Ok,
        error: None,
        response_sha256: hash_output(&response),
        response,
        latency_ms: 1.0,
        input_tokens: None,
        generated_tokens: None,
        citations: vec![],
        decision: None,
        verdict: InvariantVerdict::pass(),
        retrieval_provenance: vec![],
        manifest_ref: "m".into(),
        config_hash: "c".into(),
        corpus_version_id: "v".into(),
        compliance_tags: vec![],
        provider_meta: Default::default(),
        valid_time: t,
        record_time: t,
    }
}

#[test]
fn concurrent_appends_never_interleave() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let writer = Arc::new(TraceWriter::open(&path).unwrap());
    std::thread::scope(|s| {
        for t in 0..16 {
            let w = Arc::clone(&writer);
            s.spawn(move || {
                for j in 0..25 {
                    w.append(record(t * 25 + j)).unwrap();
                }
            });
        }
    });
    let runs = read_runs(&path).unwrap();
    assert_eq!(runs.len(), 400);
    let mut ids: Vec<_> = runs.iter().map(|r| r.run_id.clone()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 400);
    assert!(runs.windows(2).all(|w| w[0].record_time <= w[1].record_time));
    assert!(runs.iter().all(|r| hash_output(&r.response) == r.response_sha256));
    let dup = writer.append(record(3));
    assert!(dup.is_err());
}

