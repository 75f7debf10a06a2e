//! On-disk documents: scenes, plan results, pose output, benchmark specs and
//! reports, and session transcripts. All are JSON except the bench spec,
//! which may also be TOML.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tidyloop_core::bench_eval::{ActivityType, BatchReport, ScenarioSpec};
use tidyloop_core::planner::{ExecutionOutcome, Plan};
use tidyloop_core::pose_synthesis::PoseSolution;
use tidyloop_core::scene_graph::SceneGraph;
use tidyloop_core::session::{FailureReason, Session, SessionStatus};

use crate::config::EngineConfig;
use crate::error::CliError;

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Pretty JSON with a trailing newline: the canonical text of every output document.
pub fn to_document<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("documents serialize");
    s.push('\n');
    s
}

/// Parses and validates a scene document.
pub fn parse_scene(text: &str) -> Result<SceneGraph, CliError> {
    let g: SceneGraph = serde_json::from_str(text).map_err(|e| CliError::new("InvalidScene", e.to_string()))?;
    let report = g.validate();
    if !report.is_ok() {
        let detail = serde_json::to_string(&report).unwrap_or_default();
        return Err(CliError::new("InvalidScene", detail));
    }
    Ok(g)
}

pub fn read_scene(path: &Path) -> Result<SceneGraph, CliError> {
    parse_scene(&read_text(path)?)
}

/// Output of `plan`: the final plan, its execution, the poses and the run's metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub instruction: String,
    pub status: SessionStatus,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Plan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<ExecutionOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution: Option<PoseSolution>,
    /// Raw per-run metrics (no normalization: a single run has no batch).
    pub metrics: BTreeMap<String, f64>,
    pub config_hash: String,
}

/// Benchmark batch description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    /// `tidy`, `clean`, `pack_unpack`, `load_unload`, or `nonsemantic` for
    /// the box and cylinder mix-or-separate variant.
    pub activity: String,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    /// First seed; defaults to the global `--seed`.
    #[serde(default)]
    pub first_seed: Option<u64>,
    #[serde(default = "default_held_out")]
    pub held_out: usize,
    /// Inclusive object count range; defaults to the activity's row ± 3
    /// (5 to 10 for `nonsemantic`).
    #[serde(default)]
    pub object_count_range: Option<[usize; 2]>,
}

fn default_seeds() -> usize {
    20
}

fn default_held_out() -> usize {
    2
}

pub enum Activity {
    Semantic(ScenarioSpec),
    NonSemantic([usize; 2]),
}

impl BenchSpec {
    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let is_toml = path.extension().is_some_and(|e| e == "toml");
        let spec: Self = if is_toml {
            toml::from_str(text).map_err(|e| CliError::new("InvalidSpec", e.to_string()))?
        } else {
            serde_json::from_str(text).map_err(|e| CliError::new("InvalidSpec", e.to_string()))?
        };
        if spec.seeds == 0 {
            return Err(CliError::new("InvalidSpec", "seeds must be positive"));
        }
        Ok(spec)
    }

    pub fn activity(&self) -> Result<Activity, CliError> {
        if self.activity == "nonsemantic" {
            return Ok(Activity::NonSemantic(self.object_count_range.unwrap_or([5, 10])));
        }
        let a = ActivityType::parse(&self.activity)
            .ok_or_else(|| CliError::new("InvalidSpec", format!("unknown activity `{}`", self.activity)))?;
        let mut spec = ScenarioSpec::new(a, 0);
        if let Some(r) = self.object_count_range {
            spec.object_count_range = r;
        }
        spec.validate().map_err(|e| CliError::new("InvalidSpec", e.to_string()))?;
        Ok(Activity::Semantic(spec))
    }
}

/// Output of `bench`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReportDocument {
    pub config_hash: String,
    pub config: EngineConfig,
    pub spec: BenchSpec,
    pub seeds: Vec<u64>,
    pub batch: BatchReport,
}

/// A session transcript is the session document itself: initial state,
/// ordered operations, every backend call and every iteration.
pub fn transcript_text(s: &Session) -> String {
    to_document(s)
}

pub fn parse_transcript(text: &str) -> Result<Session, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::new("InvalidTranscript", e.to_string()))
}
