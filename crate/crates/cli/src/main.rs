use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use driftwatch_core::attestation::{self, write_attestation_report, AttestationError};
use driftwatch_core::corpus::{Corpus, CorpusError};
use driftwatch_core::runner::{
    default_probe_queries, emit_report, ordering_probe, render_text, run_experiment, seed_sweep, ExperimentPlan,
    OutputPaths, ReportBundle, RunnerError, SWEEP_SEEDS,
};
use driftwatch_core::tasks::{generate_fixture_db, TaskError, TaskId};

const EXIT_INVARIANT: u8 = 2;
const EXIT_PROVIDER: u8 = 3;
const EXIT_CONFIG: u8 = 4;

#[derive(Parser)]
#[command(name = "driftwatch", version, about = "Measure, attest and classify output drift of text-generation providers")]
struct Cli {
    /// JSON run configuration (endpoints, plan, paths). Defaults to a
    /// deterministic mock over the bundled corpus, writing under out/.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root for traces/, manifests/, reports/ and fixtures/.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct MatrixArgs {
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<TaskId>>,
    #[arg(long, value_delimiter = ',')]
    temps: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    conc: Option<Vec<u32>>,
    #[arg(long)]
    trials: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the experiment matrix and write traces and reports.
    Run {
        #[command(flatten)]
        matrix: MatrixArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Abort a condition on the first failed run.
        #[arg(long)]
        strict: bool,
    },
    /// Re-execute a trace against a configured endpoint and attest hashes.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        endpoint: String,
    },
    /// Rebuild reports from existing traces.
    Report {
        #[arg(long)]
        traces: String,
    },
    /// Run the plan at temperature 0 once per seed.
    Sweep {
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        seeds: Option<Vec<u64>>,
        #[command(flatten)]
        matrix: MatrixArgs,
    },
    /// Check that retrieval order ignores candidate presentation order.
    ProbeOrdering {
        #[arg(long, default_value_t = 1000)]
        permutations: u32,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Generate the synthetic finance database fixture.
    GenFixture {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        rows: usize,
        #[arg(long)]
        path: Option<PathBuf>,
    },
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

fn runner_code(e: &RunnerError) -> u8 {
    match e {
        RunnerError::ConditionAborted { .. } | RunnerError::Provider(_) => EXIT_PROVIDER,
        RunnerError::Invariant(_) | RunnerError::Task(TaskError::FixtureTampered { .. }) => EXIT_INVARIANT,
        RunnerError::Attestation(AttestationError::Provider(_)) => EXIT_PROVIDER,
        _ => EXIT_CONFIG,
    }
}

impl From<RunnerError> for Failure {
    fn from(e: RunnerError) -> Self {
        Failure::new(runner_code(&e), e)
    }
}

fn load_plan(cli: &Cli) -> Result<ExperimentPlan, Failure> {
    let mut plan = match &cli.config {
        Some(p) => ExperimentPlan::load(p).map_err(|e| Failure::new(EXIT_CONFIG, e))?,
        None => ExperimentPlan::default(),
    };
    if let Some(root) = &cli.out {
        plan.paths = OutputPaths::under(root);
        plan.fixture.path = root.join("fixtures").join("toy_finance.sqlite");
    }
    Ok(plan)
}

fn apply_matrix(plan: &mut ExperimentPlan, m: &MatrixArgs) {
    if let Some(t) = &m.tasks {
        plan.tasks = t.clone();
    }
    if let Some(t) = &m.temps {
        plan.temperatures = t.clone();
    }
    if let Some(c) = &m.conc {
        plan.concurrencies = c.clone();
    }
    if let Some(n) = m.trials {
        plan.trials_per_condition = n;
    }
}

fn publish(bundle: &ReportBundle, dir: &Path) -> Result<(), Failure> {
    let files = emit_report(bundle, dir)?;
    print!("{}", render_text(bundle));
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Run { matrix, seed, strict } => {
            let mut plan = load_plan(cli)?;
            apply_matrix(&mut plan, matrix);
            if let Some(s) = seed {
                plan.seeds = vec![*s];
            }
            plan.strict |= *strict;
            let outcome = run_experiment(&plan)?;
            println!("trace {} ({} runs)", outcome.trace_path.display(), outcome.records.len());
            publish(&outcome.bundle, &plan.paths.reports)
        }
        Command::Replay { trace, endpoint } => {
            let plan = load_plan(cli)?;
            let ep = plan
                .endpoints
                .iter()
                .find(|e| &e.name == endpoint)
                .ok_or_else(|| Failure::new(EXIT_CONFIG, anyhow::anyhow!("no endpoint named {endpoint} in config")))?;
            let corpus = active_corpus(&plan)?;
            let report = attestation::replay(trace, ep, &corpus.version_id).map_err(|e| {
                let code = match e {
                    AttestationError::Provider(_) => EXIT_PROVIDER,
                    AttestationError::CorruptTrace { .. } => EXIT_INVARIANT,
                    _ => EXIT_CONFIG,
                };
                Failure::new(code, e)
            })?;
            let path = write_attestation_report(&report, &plan.paths.reports).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
            println!(
                "replayed {} runs: {} matched, {} mismatched, manifest consistent: {}",
                report.replayed(),
                report.matched,
                report.mismatched.len(),
                report.manifest_consistent
            );
            for m in &report.mismatched {
                println!("mismatch {} {} -> {}", m.run_id, m.old_hash, m.new_hash.as_deref().unwrap_or("error"));
            }
            println!("wrote {}", path.display());
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::new(EXIT_INVARIANT, anyhow::anyhow!("attestation failed")))
            }
        }
        Command::Report { traces } => {
            let plan = load_plan(cli)?;
            let mut records = Vec::new();
            let paths = glob::glob(traces).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
            let mut matched = 0;
            for p in paths {
                let p = p.map_err(|e| Failure::new(EXIT_CONFIG, e))?;
                matched += 1;
                records.extend(attestation::read_runs(&p).map_err(|e| Failure::new(EXIT_INVARIANT, e))?);
            }
            if matched == 0 {
                return Err(Failure::new(EXIT_CONFIG, anyhow::anyhow!("no traces match {traces}")));
            }
            let bundle = ReportBundle::from_records(&records)?;
            publish(&bundle, &plan.paths.reports)
        }
        Command::Sweep { seeds, matrix } => {
            let mut plan = load_plan(cli)?;
            if matrix.temps.is_none() {
                plan.temperatures = vec![0.0];
            }
            apply_matrix(&mut plan, matrix);
            let seeds = seeds.clone().unwrap_or_else(|| SWEEP_SEEDS.to_vec());
            let report = seed_sweep(&plan, &seeds)?;
            for s in &report.seeds {
                let rate = s.min_identity.map_or("n/a".to_string(), |r| format!("{:.3}", r * 100.0));
                println!("seed {:>6}  min identity {rate}%  trace {}", s.seed, s.trace_path.display());
                for (label, r) in &s.identity {
                    println!("    {label}  {}", r.map_or("n/a".to_string(), |r| format!("{:.3}", r * 100.0)));
                }
            }
            println!("cross-seed consistent: {}", report.consistent);
            std::fs::create_dir_all(&plan.paths.reports)
                .and_then(|_| {
                    std::fs::write(
                        plan.paths.reports.join("sweep.json"),
                        serde_json::to_string_pretty(&report).expect("sweep serializes") + "\n",
                    )
                })
                .map_err(|e| Failure::new(EXIT_CONFIG, e))?;
            if report.consistent {
                Ok(())
            } else {
                Err(Failure::new(EXIT_INVARIANT, anyhow::anyhow!("seeds disagree")))
            }
        }
        Command::ProbeOrdering { permutations, k, seed } => {
            let plan = load_plan(cli)?;
            let corpus = active_corpus(&plan)?;
            let snippets = corpus
                .snippets(plan.chunk_chars, plan.overlap_chars)
                .map_err(|e| Failure::new(EXIT_INVARIANT, e))?;
            let report = ordering_probe(&snippets, &default_probe_queries(), *permutations, *k, *seed);
            if let Some(v) = &report.corpus_violation {
                println!("corpus invariant violated: {v}");
            }
            for q in &report.queries {
                println!(
                    "{}  {:>5} permutations  {:>3} violations  {:?}",
                    if q.passed { "PASS" } else { "FAIL" },
                    q.permutations,
                    q.violations,
                    q.query
                );
            }
            if report.passed {
                Ok(())
            } else {
                Err(Failure::new(EXIT_INVARIANT, anyhow::anyhow!("ordering probe found violations")))
            }
        }
        Command::GenFixture { seed, rows, path } => {
            let plan = load_plan(cli)?;
            let path = path.clone().unwrap_or(plan.fixture.path);
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)
                    .with_context(|| format!("creating {}", dir.display()))
                    .map_err(|e| Failure::new(EXIT_CONFIG, e))?;
            }
            let f = generate_fixture_db(&path, *seed, *rows).map_err(|e| {
                let code = if matches!(e, TaskError::InvalidRowCount) { EXIT_CONFIG } else { EXIT_INVARIANT };
                Failure::new(code, e)
            })?;
            println!("{} rows={} seed={} sha256={}", f.path.display(), f.n_rows, f.seed, f.content_hash);
            Ok(())
        }
    }
}

fn active_corpus(plan: &ExperimentPlan) -> Result<Corpus, Failure> {
    match &plan.corpus_manifest {
        Some(p) => Corpus::load(p).map_err(|e: CorpusError| Failure::new(EXIT_CONFIG, e)),
        None => Ok(Corpus::bundled()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
