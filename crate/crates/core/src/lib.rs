//! Deterministic drift measurement for text-generation providers on
//! regulated-finance tasks: retrieval, task rendering, invariant checks,
//! drift statistics, audit traces and the experiment runner.

pub mod attestation;
pub mod corpus;
pub mod digest;
pub mod invariants;
pub mod metrics;
pub mod provider;
pub mod rng;
pub mod runner;
pub mod tasks;

pub use attestation::{
    append_trace, hash_output, query_asof, read_runs, read_trace, replay, AttestationReport, TimeAxis, TraceRecord,
    TraceWriter,
};
pub use corpus::{retrieve, Corpus, ScoredSnippet, Snippet, SourceDocument};
pub use invariants::{InvariantVerdict, Violation, ViolationCode};
pub use metrics::{
    aggregate_condition, edit_distance, factual_drift, fisher_exact_2x2, normalized_edit_distance, wilson_ci,
    ConditionStats, Decision, RunOutput,
};
pub use provider::{
    capture_manifest, generate, DecodingConfig, DecodingMethod, EndpointKind, EnvironmentManifest, GenerationResult,
    ProviderEndpoint,
};
pub use runner::{classify_tier, compare_models, emit_report, run_experiment, ExperimentPlan, ReportBundle};
pub use tasks::{generate_fixture_db, render_prompt, FixtureDB, TaskCase, TaskCatalog, TaskId, TaskSpec};
