//! The dual loop as a single-threaded state machine: plan or replan, execute
//! symbolically, synthesize poses for every base, collect feedback, repeat.
//!
//! Every operation that changes a session is appended to `ops`, so a session
//! can be rebuilt from its initial scene, instruction, config and op list.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::feedback::{FeedbackEvent, FeedbackKind, FeedbackPayload, Origin, PhysicalDetail};
use crate::llm_backend::{CallRecord, Caller, PlannerBackend, DEFAULT_PROMPT_CEILING, DEFAULT_RETRIES};
use crate::math::derive_seed;
use crate::objectives::ObjectiveBreakdown;
use crate::planner::{
    execute_symbolically, plan_task, replan_with_feedback, ActionStep, ExecutionOutcome, Plan, PlannerError,
    TaskContext,
};
use crate::pose_synthesis::{synthesize_scene, PoseSolution, SynthesisConfig, SynthesisError};
use crate::preference::{
    extract_from_adjustment, PreferenceError, PreferenceRecord, PreferenceStore, DEFAULT_TOKEN_BUDGET,
};
use crate::scene_graph::{RelationChange, SceneError, SceneGraph};

pub const DEFAULT_LOOP_BUDGET: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Planning,
    /// The planner could not produce a usable answer; a retry step or new
    /// human input is needed.
    AwaitingHuman,
    Converged,
    Failed,
}

impl SessionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::Planning => "planning",
            SessionStatus::AwaitingHuman => "awaiting_human",
            SessionStatus::Converged => "converged",
            SessionStatus::Failed => "failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, SessionStatus::Converged | SessionStatus::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub budget: usize,
    pub synthesis: SynthesisConfig,
    pub prompt_ceiling: usize,
    pub retries: usize,
    pub token_budget: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_LOOP_BUDGET,
            synthesis: SynthesisConfig::default(),
            prompt_ceiling: DEFAULT_PROMPT_CEILING,
            retries: DEFAULT_RETRIES,
            token_budget: DEFAULT_TOKEN_BUDGET,
        }
    }
}

/// Why a session ended in `failed`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum FailureReason {
    LoopBudgetExhausted {
        iterations: usize,
    },
    /// Two consecutive plans failed at the same step for the same reasons.
    NoProgress {
        iteration: usize,
        step: String,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LoopError {
    #[error("session is {0:?} and cannot be stepped")]
    NotSteppable(SessionStatus),
    #[error("loop budget of {iterations} iterations exhausted")]
    LoopBudgetExhausted { iterations: usize },
    #[error("no progress at iteration {iteration}: `{step}` failed again")]
    NoProgress { iteration: usize, step: String },
    #[error("the adjusted scene does not differ from the current one")]
    EmptyDiff,
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// One recorded mutation of a session, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SessionOp {
    Step,
    Preference { text: String },
    Adjustment { scene: SceneGraph },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    pub steps: Vec<ActionStep>,
    pub outcome_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_step: Option<usize>,
    /// Executor and synthesizer events produced by this iteration.
    pub events: Vec<FeedbackEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feasible: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<ObjectiveBreakdown>,
    /// Backend calls made while planning this iteration.
    pub call_ids: Vec<usize>,
    pub status: SessionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
pub enum TranscriptEntry {
    Iteration(IterationRecord),
    Preference { record: PreferenceRecord },
    Adjustment { record: PreferenceRecord, changes: Vec<RelationChange> },
    Profile { created: Vec<PreferenceRecord> },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
    pub calls: Vec<CallRecord>,
}

/// What one step did, for callers that report progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub status: SessionStatus,
    pub events: Vec<FeedbackEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub initial: SceneGraph,
    pub instruction: String,
    pub config: LoopConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Plan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<ExecutionOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution: Option<PoseSolution>,
    pub store: PreferenceStore,
    /// Store the session started from, for replay.
    pub seed_store: PreferenceStore,
    /// Events not yet shown to the planner.
    pub pending: Vec<FeedbackEvent>,
    pub transcript: Transcript,
    /// Iterations since the session was (re)opened; bounded by the budget.
    pub loop_iteration: usize,
    /// Iterations over the whole session lifetime.
    pub total_iterations: usize,
    pub status: SessionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureReason>,
    pub ops: Vec<SessionOp>,
}

impl Session {
    pub fn new(id: &str, initial: SceneGraph, instruction: &str, config: LoopConfig) -> Self {
        Self {
            id: id.to_string(),
            initial,
            instruction: instruction.to_string(),
            config,
            plan: None,
            outcome: None,
            solution: None,
            store: PreferenceStore::new(config.token_budget),
            seed_store: PreferenceStore::new(config.token_budget),
            pending: Vec::new(),
            transcript: Transcript::default(),
            loop_iteration: 0,
            total_iterations: 0,
            status: SessionStatus::Planning,
            failure: None,
            ops: Vec::new(),
        }
    }

    /// Starts from an existing preference store instead of an empty one.
    pub fn with_store(mut self, store: PreferenceStore) -> Self {
        self.seed_store = store.clone();
        self.store = store;
        self
    }

    /// Logical clock: the number of operations applied so far.
    fn now(&self) -> u64 {
        self.ops.len() as u64
    }

    /// The planned goal with synthesized poses, or the initial scene before
    /// the first plan.
    pub fn current_scene(&self) -> SceneGraph {
        match (&self.plan, &self.solution) {
            (Some(plan), Some(sol)) => sol.apply_to(&with_base_poses(&plan.goal, &self.initial)),
            (Some(plan), None) => with_base_poses(&plan.goal, &self.initial),
            _ => self.initial.clone(),
        }
    }

    fn reopen(&mut self) {
        if self.status.is_terminal() {
            self.status = SessionStatus::Planning;
            self.loop_iteration = 0;
            self.failure = None;
        }
    }

    /// Direct preference instruction from the human.
    pub fn add_preference(&mut self, text: &str) -> Result<PreferenceRecord, LoopError> {
        let record = self.store.ingest_instruction(text, self.now())?;
        self.ops.push(SessionOp::Preference { text: text.to_string() });
        self.pending.push(FeedbackEvent::instruction(&record.text));
        self.transcript.entries.push(TranscriptEntry::Preference { record: record.clone() });
        self.reopen();
        Ok(record)
    }

    /// Human edit of the current scene; the diff is summarized into a
    /// preference that takes effect on the next iteration.
    pub fn add_adjustment(
        &mut self,
        adjusted: SceneGraph,
        backend: &dyn PlannerBackend,
    ) -> Result<PreferenceRecord, LoopError> {
        let changes = self.current_scene().diff_with_poses(&adjusted)?;
        if changes.is_empty() {
            return Err(LoopError::EmptyDiff);
        }
        let now = self.now();
        let mut caller = make_caller(backend, &mut self.transcript.calls, &self.config, self.total_iterations);
        let record = extract_from_adjustment(&mut self.store, &adjusted, &changes, &mut caller, now)?;
        self.ops.push(SessionOp::Adjustment { scene: adjusted });
        self.pending.push(FeedbackEvent::adjustment(&record.text, changes.clone()));
        self.transcript.entries.push(TranscriptEntry::Adjustment { record: record.clone(), changes });
        self.reopen();
        Ok(record)
    }

    /// One loop iteration. A planner failure leaves the session awaiting
    /// human input and is returned as an error.
    pub fn step(&mut self, backend: &dyn PlannerBackend) -> Result<StepReport, LoopError> {
        if self.status.is_terminal() {
            return Err(LoopError::NotSteppable(self.status));
        }
        self.ops.push(SessionOp::Step);
        let now = self.now();
        let index = self.total_iterations;
        let first_call = self.transcript.calls.len();

        let created = {
            let mut caller = make_caller(backend, &mut self.transcript.calls, &self.config, index);
            self.store.maintain(&mut caller, now)
        };
        match created {
            Ok(created) if !created.is_empty() => self.transcript.entries.push(TranscriptEntry::Profile { created }),
            Ok(_) => {}
            Err(e) => return Err(self.planning_failed(index, first_call, e.into())),
        }

        let prefs = self.store.active_cloned();
        let pending = core::mem::take(&mut self.pending);
        let ctx = TaskContext { instruction: &self.instruction, preferences: &prefs, feedback: &pending };
        let planned = {
            let mut caller = make_caller(backend, &mut self.transcript.calls, &self.config, index);
            match (&self.plan, &self.outcome) {
                (Some(plan), Some(outcome)) => replan_with_feedback(&self.initial, plan, outcome, &ctx, &mut caller),
                _ => plan_task(&self.initial, &ctx, &mut caller),
            }
        };
        let plan = match planned {
            Ok(p) => p,
            Err(e) => {
                self.pending = pending;
                return Err(self.planning_failed(index, first_call, e.into()));
            }
        };

        let outcome = execute_symbolically(&self.initial, &plan);
        let mut events: Vec<FeedbackEvent> = outcome.events.clone();
        let mut feasible = None;
        let mut breakdown = None;
        let mut solution = None;
        if outcome.ok {
            let seed = derive_seed(self.config.synthesis.seed, index as u64);
            let sol = synthesize_goal(&plan.goal, &self.initial, &self.config.synthesis.with_seed(seed))?;
            feasible = Some(sol.feasible);
            breakdown = Some(sol.breakdown);
            events.extend(sol.feedback.iter().cloned());
            solution = Some(sol);
        }

        let signature = outcome.failure_signature(&plan);
        let previous_signature = match (&self.plan, &self.outcome) {
            (Some(p), Some(o)) => o.failure_signature(p),
            _ => None,
        };
        self.loop_iteration += 1;
        self.total_iterations += 1;
        let converged = outcome.ok && feasible == Some(true) && self.pending.is_empty();
        let mut failure = None;
        if converged {
            self.status = SessionStatus::Converged;
        } else if signature.is_some() && signature == previous_signature {
            let step = signature.as_ref().map(|(s, _)| s.to_string()).unwrap_or_default();
            failure = Some(FailureReason::NoProgress { iteration: index, step });
        } else if self.loop_iteration >= self.config.budget {
            failure = Some(FailureReason::LoopBudgetExhausted { iterations: self.loop_iteration });
        } else {
            self.status = SessionStatus::Planning;
        }
        if failure.is_some() {
            self.status = SessionStatus::Failed;
        }
        self.failure = failure.clone();

        // synthesizer findings reach the planner through the pending queue;
        // executor events travel with the outcome
        self.pending.extend(events.iter().filter(|e| e.origin == Origin::Synthesizer).cloned());
        self.transcript.entries.push(TranscriptEntry::Iteration(IterationRecord {
            index,
            steps: plan.steps.clone(),
            outcome_ok: outcome.ok,
            failed_step: outcome.failed_step,
            events: events.clone(),
            feasible,
            breakdown,
            call_ids: (first_call..self.transcript.calls.len()).collect(),
            status: self.status,
            error: None,
        }));
        self.plan = Some(plan);
        self.outcome = Some(outcome);
        self.solution = solution;
        Ok(StepReport { iteration: index, status: self.status, events, failure })
    }

    fn planning_failed(&mut self, index: usize, first_call: usize, e: LoopError) -> LoopError {
        self.status = SessionStatus::AwaitingHuman;
        self.transcript.entries.push(TranscriptEntry::Iteration(IterationRecord {
            index,
            steps: Vec::new(),
            outcome_ok: false,
            failed_step: None,
            events: Vec::new(),
            feasible: None,
            breakdown: None,
            call_ids: (first_call..self.transcript.calls.len()).collect(),
            status: self.status,
            error: Some(format!("{e}")),
        }));
        e
    }

    /// Steps until converged or failed.
    pub fn run_loop(&mut self, backend: &dyn PlannerBackend) -> Result<(), LoopError> {
        while !self.status.is_terminal() {
            self.step(backend)?;
        }
        match &self.failure {
            Some(FailureReason::LoopBudgetExhausted { iterations }) => {
                Err(LoopError::LoopBudgetExhausted { iterations: *iterations })
            }
            Some(FailureReason::NoProgress { iteration, step }) => {
                Err(LoopError::NoProgress { iteration: *iteration, step: step.clone() })
            }
            None => Ok(()),
        }
    }

    /// Re-runs this session's ops on a fresh copy of its starting state.
    /// Errors from individual ops are part of the recorded behavior and are
    /// not propagated.
    pub fn replayed(&self, backend: &dyn PlannerBackend) -> Self {
        let mut s = Session::new(&self.id, self.initial.clone(), &self.instruction, self.config)
            .with_store(self.seed_store.clone());
        for op in &self.ops {
            let _ = match op {
                SessionOp::Step => s.step(backend).map(|_| ()),
                SessionOp::Preference { text } => s.add_preference(text).map(|_| ()),
                SessionOp::Adjustment { scene } => s.add_adjustment(scene.clone(), backend).map(|_| ()),
            };
        }
        s
    }

    /// Prompt texts of every call, in order.
    pub fn prompts(&self) -> impl Iterator<Item = &str> {
        self.transcript.calls.iter().map(|c| c.context.as_str())
    }
}

fn make_caller<'a>(
    backend: &'a dyn PlannerBackend,
    log: &'a mut Vec<CallRecord>,
    config: &LoopConfig,
    iteration: usize,
) -> Caller<'a> {
    let mut caller = Caller::new(backend, log);
    caller.ceiling = config.prompt_ceiling;
    caller.retries = config.retries;
    caller.iteration = iteration;
    caller
}

/// Copies base poses from `initial` into `goal`, which may lack them.
fn with_base_poses(goal: &SceneGraph, initial: &SceneGraph) -> SceneGraph {
    let mut g = goal.clone();
    for (id, n) in g.nodes.iter_mut() {
        if n.is_base {
            if let Some(p) = initial.node(id).and_then(|i| i.pose) {
                n.pose = Some(p);
            }
        }
    }
    g
}

/// Synthesizes poses on every base that supports something. A region too
/// small for a group becomes synthesizer feedback instead of an error.
pub fn synthesize_goal(
    goal: &SceneGraph,
    initial: &SceneGraph,
    cfg: &SynthesisConfig,
) -> Result<PoseSolution, SynthesisError> {
    let g = with_base_poses(goal, initial);
    let mut merged = PoseSolution {
        poses: BTreeMap::new(),
        breakdown: ObjectiveBreakdown::default(),
        feasible: true,
        feedback: Vec::new(),
    };
    let bases: Vec<&str> = g
        .nodes
        .values()
        .filter(|n| n.is_base && g.supported_children(&n.id).next().is_some())
        .map(|n| n.id.as_str())
        .collect();
    for (k, base) in bases.iter().enumerate() {
        let sub = cfg.with_seed(derive_seed(cfg.seed, k as u64));
        match synthesize_scene(&g, base, &sub) {
            Ok(sol) => {
                merged.poses.extend(sol.poses);
                let b = &mut merged.breakdown;
                b.manhattan += sol.breakdown.manhattan;
                b.area += sol.breakdown.area;
                b.orth += sol.breakdown.orth;
                b.collision_penalty += sol.breakdown.collision_penalty;
                b.stability_cost += sol.breakdown.stability_cost;
                b.total += sol.breakdown.total;
                merged.feasible &= sol.feasible;
                merged.feedback.extend(sol.feedback);
            }
            Err(SynthesisError::RegionTooSmall(what)) => {
                merged.feasible = false;
                merged.feedback.push(region_too_small(&g, base, &what));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(merged)
}

fn region_too_small(g: &SceneGraph, base: &str, what: &str) -> FeedbackEvent {
    let mut object_ids = alloc::vec![base.to_string()];
    if what != base {
        object_ids.push(what.to_string());
    }
    let relations = g.supported_children(base).cloned().collect();
    FeedbackEvent {
        kind: FeedbackKind::Collision,
        origin: Origin::Synthesizer,
        payload: FeedbackPayload::Physical(PhysicalDetail {
            code: "RegionTooSmall".into(),
            object_ids,
            relations,
            step: None,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_backend::mock::MockBackend;
    use crate::scene_graph::{ObjectNode, Pose, Relation, RelationKind};

    fn quick() -> LoopConfig {
        let synthesis = SynthesisConfig { iterations_per_group: 400, restarts: 2, ..SynthesisConfig::default() };
        LoopConfig { synthesis, ..LoopConfig::default() }
    }

    fn desk() -> SceneGraph {
        SceneGraph::new()
            .with_node(
                ObjectNode::base("table", "table", [0.6, 0.4, 0.02], 20.0).with_pose(Pose::new([0.0, 0.0, 0.74], 0.0)),
            )
            .with_node(ObjectNode::new("book_1", "book", [0.1, 0.15, 0.02], 0.5))
            .with_node(ObjectNode::new("book_2", "notebook", [0.1, 0.15, 0.02], 0.5))
            .with_node(ObjectNode::new("mug", "mug", [0.04, 0.04, 0.05], 0.3))
            .with_edge(Relation::observed(RelationKind::On, "table", "book_1"))
            .with_edge(Relation::observed(RelationKind::On, "table", "book_2"))
            .with_edge(Relation::observed(RelationKind::On, "table", "mug"))
    }

    #[test]
    fn converges_in_one_iteration() {
        let mock = MockBackend::default();
        let mut s = Session::new("s1", desk(), "Tidy the table.", quick());
        s.run_loop(&mock).unwrap();
        assert_eq!(s.status, SessionStatus::Converged);
        assert_eq!(s.loop_iteration, 1);
        assert!(s.solution.as_ref().unwrap().feasible);
    }

    #[test]
    fn terminal_sessions_refuse_steps_until_reopened() {
        let mock = MockBackend::default();
        let mut s = Session::new("s1", desk(), "Tidy the table.", quick());
        s.run_loop(&mock).unwrap();
        assert!(matches!(s.step(&mock), Err(LoopError::NotSteppable(SessionStatus::Converged))));
        s.add_preference("No stacking please.").unwrap();
        assert_eq!(s.status, SessionStatus::Planning);
        s.step(&mock).unwrap();
        assert!(s.transcript.calls.last().unwrap().context.contains("No stacking please."));
    }

    #[test]
    fn replay_is_identical() {
        let mock = MockBackend::default();
        let mut s = Session::new("s1", desk(), "Tidy the table.", quick());
        s.run_loop(&mock).unwrap();
        s.add_preference("I prefer everything laid flat.").unwrap();
        s.run_loop(&mock).unwrap();
        assert_eq!(s.replayed(&mock), s);
    }
}
