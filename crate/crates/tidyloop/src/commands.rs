//! Subcommand implementations. Each returns what it would print so the
//! binary stays a thin shell and the commands can be driven from tests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use tidyloop_core::bench_eval::{
    raw_metrics, run_benchmark, sample_nonsemantic, sample_scenario, BatchReport, BenchConfig, RunInputs, METRICS,
};
use tidyloop_core::llm_backend::mock::MockBackend;
use tidyloop_core::llm_backend::PlannerBackend;
use tidyloop_core::preference::{Embedder, HashedBagOfWords};
use tidyloop_core::session::{synthesize_goal, LoopError, Session};

use crate::config::{BackendKind, EmbedderKind, EngineConfig};
use crate::error::CliError;
use crate::formats::{
    parse_transcript, read_scene, read_text, to_document, transcript_text, write_text, Activity, BenchReportDocument,
    BenchSpec, PlanDocument,
};
use crate::remote::{RemoteBackend, RemoteEmbedder};
use crate::server::{router, AppState};
use crate::sessions::SessionStore;

pub fn backend(cfg: &EngineConfig) -> Result<Arc<dyn PlannerBackend>, CliError> {
    Ok(match cfg.backend {
        BackendKind::Mock => Arc::new(MockBackend::default()),
        BackendKind::Remote => Arc::new(RemoteBackend::from_env(&cfg.remote)?),
    })
}

pub fn embedder(cfg: &EngineConfig) -> Result<Box<dyn Embedder>, CliError> {
    Ok(match cfg.embedder {
        EmbedderKind::Hashed => Box::new(HashedBagOfWords),
        EmbedderKind::Remote => Box::new(RemoteEmbedder::from_env(&cfg.remote)?),
    })
}

fn loop_error(e: LoopError) -> CliError {
    let code = match &e {
        LoopError::NotSteppable(_) => "NotSteppable",
        LoopError::LoopBudgetExhausted { .. } => "LoopBudgetExhausted",
        LoopError::NoProgress { .. } => "NoProgress",
        LoopError::EmptyDiff => "EmptyDiff",
        LoopError::Planner(_) => "PlannerFailed",
        LoopError::Synthesis(_) => "SynthesisFailed",
        LoopError::Preference(_) => "InvalidPreference",
        LoopError::Scene(_) => "InvalidScene",
    };
    CliError::new(code, e.to_string())
}

pub struct PlanArgs<'a> {
    pub scene: &'a Path,
    pub instruction: &'a str,
    pub out_dir: &'a Path,
}

/// Runs the full loop and writes `plan.json`, `poses.json`, `report.json`
/// and `transcript.json` into the output directory. The files are written
/// even when the loop fails; the failure is then returned.
pub fn plan(cfg: &EngineConfig, args: &PlanArgs<'_>) -> Result<String, CliError> {
    let scene = read_scene(args.scene)?;
    let backend = backend(cfg)?;
    let embedder = embedder(cfg)?;
    let mut s = Session::new("plan", scene, args.instruction, cfg.loop_config());
    let result = s.run_loop(backend.as_ref());

    let metrics = match (&s.plan, &s.outcome) {
        (Some(plan), Some(outcome)) => raw_metrics(
            &RunInputs {
                initial: &s.initial,
                plan,
                outcome,
                solution: s.solution.as_ref(),
                learned_preference: None,
                ground_truth_preference: "",
                applied: &[],
            },
            embedder.as_ref(),
        )
        .map_err(|e| CliError::new("MetricsFailed", e.to_string()))?,
        _ => Default::default(),
    };
    let doc = PlanDocument {
        instruction: s.instruction.clone(),
        status: s.status,
        iterations: s.loop_iteration,
        failure: s.failure.clone(),
        plan: s.plan.clone(),
        outcome: s.outcome.clone(),
        solution: s.solution.clone(),
        metrics,
        config_hash: cfg.hash(),
    };
    let dir = args.out_dir;
    write_text(&dir.join("plan.json"), &to_document(&doc.plan))?;
    write_text(&dir.join("poses.json"), &to_document(&doc.solution))?;
    write_text(&dir.join("report.json"), &to_document(&doc))?;
    write_text(&dir.join("transcript.json"), &transcript_text(&s))?;
    result.map_err(loop_error)?;
    Ok(format!("{} after {} iteration(s); wrote {}\n", s.status.as_str(), s.loop_iteration, dir.display()))
}

/// Pose synthesis only, with the scene's own relations as the goal.
pub fn synthesize(cfg: &EngineConfig, scene: &Path) -> Result<String, CliError> {
    let g = read_scene(scene)?;
    let sol = synthesize_goal(&g, &g, &cfg.loop_config().synthesis)
        .map_err(|e| CliError::new("SynthesisFailed", e.to_string()))?;
    Ok(to_document(&sol))
}

pub struct BenchOutput {
    pub document: BenchReportDocument,
    pub tables: String,
}

pub fn bench(cfg: &EngineConfig, spec_path: &Path) -> Result<BenchOutput, CliError> {
    let spec = BenchSpec::parse(&read_text(spec_path)?, spec_path)?;
    let first = spec.first_seed.unwrap_or(cfg.seed);
    let seeds: Vec<u64> = (0..spec.seeds as u64).map(|k| first + k).collect();
    let backend = backend(cfg)?;
    let embedder = embedder(cfg)?;
    let bench_cfg = BenchConfig { held_out: spec.held_out };
    let batch = match spec.activity()? {
        Activity::Semantic(sc) => {
            let sampler = move |seed: u64| {
                let mut s = sc.clone();
                s.seed = seed;
                sample_scenario(&s)
            };
            run_benchmark(
                &spec.activity,
                &sampler,
                &seeds,
                backend.as_ref(),
                &cfg.loop_config(),
                &bench_cfg,
                embedder.as_ref(),
            )
        }
        Activity::NonSemantic(range) => {
            let sampler = move |seed: u64| sample_nonsemantic(seed, range);
            run_benchmark(
                &spec.activity,
                &sampler,
                &seeds,
                backend.as_ref(),
                &cfg.loop_config(),
                &bench_cfg,
                embedder.as_ref(),
            )
        }
    }
    .map_err(|e| CliError::new("BenchFailed", e.to_string()))?;
    let hash = cfg.hash();
    let tables = render_tables(&batch, &hash);
    Ok(BenchOutput {
        document: BenchReportDocument { config_hash: hash, config: cfg.clone(), spec, seeds, batch },
        tables,
    })
}

fn cell(v: Option<&f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

/// Plain-text raw and normalized tables, one row per seed plus the mean.
pub fn render_tables(batch: &BatchReport, config_hash: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "activity {} ({}), config {}", batch.activity, batch.ground_truth_tag, config_hash);
    let _ = writeln!(out, "feasible runs: {}/{}", batch.feasible_runs, batch.runs.len());
    for (title, normalized) in [("raw", false), ("normalized", true)] {
        let _ = writeln!(out, "\n{title}");
        let _ = write!(out, "{:>8}", "seed");
        for m in METRICS {
            let _ = write!(out, " {m:>12}");
        }
        out.push('\n');
        for (run, rep) in batch.runs.iter().zip(&batch.reports) {
            let row = if normalized { &rep.normalized } else { &rep.raw };
            let _ = write!(out, "{:>8}", run.seed);
            for m in METRICS {
                let _ = write!(out, " {:>12}", cell(row.get(m)));
            }
            out.push('\n');
        }
        let means = if normalized { &batch.normalized_means } else { &batch.raw_means };
        let _ = write!(out, "{:>8}", "mean");
        for m in METRICS {
            let _ = write!(out, " {:>12}", cell(means.get(m)));
        }
        out.push('\n');
    }
    out
}

/// Re-runs a transcript's operations and requires the regenerated
/// transcript to match the file byte for byte.
pub fn replay(cfg: &EngineConfig, path: &Path) -> Result<String, CliError> {
    let text = read_text(path)?;
    let recorded = parse_transcript(&text)?;
    let backend = backend(cfg)?;
    let again = transcript_text(&recorded.replayed(backend.as_ref()));
    if again != text {
        let line = text
            .lines()
            .zip(again.lines())
            .position(|(a, b)| a != b)
            .unwrap_or_else(|| text.lines().count().min(again.lines().count()));
        return Err(CliError::new(
            "ReplayMismatch",
            format!("{}: first difference at line {}", path.display(), line + 1),
        ));
    }
    Ok(format!(
        "replayed {} op(s), {} backend call(s): identical\n",
        recorded.ops.len(),
        recorded.transcript.calls.len()
    ))
}

pub struct ServeArgs {
    pub host: String,
    pub port: u16,
    pub data_dir: PathBuf,
}

pub fn serve(cfg: &EngineConfig, args: &ServeArgs) -> Result<(), CliError> {
    let store = Arc::new(SessionStore::open(&args.data_dir)?);
    // built before the runtime: the blocking HTTP client must not be created
    // or dropped on an async worker
    let backend = backend(cfg)?;
    let state = AppState { store, backend: backend.clone(), loop_config: cfg.loop_config() };
    let addr = format!("{}:{}", args.host, args.port);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::new("Runtime", e.to_string()))?;
    let result = rt.block_on(async move {
        let listener =
            tokio::net::TcpListener::bind(&addr).await.map_err(|e| CliError::new("Bind", format!("{addr}: {e}")))?;
        tracing::info!(%addr, data_dir = %args.data_dir.display(), backend = backend_name(&state), "serving");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::new("Serve", e.to_string()))
    });
    drop(rt);
    drop(backend);
    result
}

fn backend_name(state: &AppState) -> &str {
    state.backend.name()
}
