//! Prompt assembly, stage output grammars, and the backend interface shared
//! by the remote chat client and the rule-driven mock.

mod grammar;
pub mod mock;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use grammar::{parse_stage_output, parse_step_line, render, ParseError, ProfileItem, StagePayload};

use crate::feedback::{FeedbackEvent, FeedbackPayload};
use crate::planner::{ActionStep, Primitive};
use crate::preference::{estimate_tokens, PreferenceRecord};
use crate::scene_graph::{Relation, RelationChange, SceneGraph};

pub const DEFAULT_PROMPT_CEILING: usize = 16_000;
pub const DEFAULT_RETRIES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Categorize,
    Intergroup,
    Intragroup,
    Replan,
    SummarizeAdjustment,
    Profile,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Categorize,
        Stage::Intergroup,
        Stage::Intragroup,
        Stage::Replan,
        Stage::SummarizeAdjustment,
        Stage::Profile,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Categorize => "categorize",
            Stage::Intergroup => "intergroup",
            Stage::Intragroup => "intragroup",
            Stage::Replan => "replan",
            Stage::SummarizeAdjustment => "summarize_adjustment",
            Stage::Profile => "profile",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

/// Stage-specific material beyond the shared context.
#[derive(Debug, Clone, Copy)]
pub enum Focus<'a> {
    None,
    Group(&'a str),
    Changes(&'a [RelationChange]),
    Records(&'a [PreferenceRecord]),
}

#[derive(Debug, Clone, Copy)]
pub struct PromptInput<'a> {
    pub scene: &'a SceneGraph,
    pub instruction: &'a str,
    /// Active preferences in prompt order (profiles first, then newest first).
    pub preferences: &'a [PreferenceRecord],
    pub feedback: &'a [FeedbackEvent],
    pub plan: Option<&'a [ActionStep]>,
    pub focus: Focus<'a>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub stage: Stage,
    pub system: String,
    pub context: String,
}

impl PromptBundle {
    pub fn text(&self) -> String {
        format!("{}\n{}", self.system, self.context)
    }

    pub fn token_estimate(&self) -> usize {
        estimate_tokens(&self.system) + estimate_tokens(&self.context)
    }

    /// Same prompt with the validator's complaint appended.
    pub fn with_retry(&self, error: &str) -> Self {
        let mut b = self.clone();
        let _ = write!(
            b.context,
            "[RETRY]\nYour previous answer was rejected: {error}\nAnswer again using the required format.\n"
        );
        b
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("prompt needs ~{estimate} tokens, ceiling is {ceiling}")]
    CeilingExceeded { estimate: usize, ceiling: usize },
    #[error("active preferences alone need ~{estimate} tokens, over the ceiling {ceiling}; the store should have been profiled")]
    PreferencesOverCeiling { estimate: usize, ceiling: usize },
}

const GRAMMAR_STEPS: &str = "Answer with a STEPS block, one action per line, nothing else:\nSTEPS\nprimitive(parent, target)\nprimitive(target) -> relation\nEND\nA relation suffix is optional; put_near accepts near, left_of, right_of, front_of or behind.";

fn system_text(stage: Stage) -> String {
    let mut s = String::new();
    s.push_str("You are the task planner of a household robot that rearranges objects.\n");
    let _ = writeln!(s, "STAGE: {}", stage.as_str());
    s.push_str("Action primitives (binary ones take the parent or reference object first):\n");
    for p in Primitive::ALL {
        let sig = if p.arity() == 1 { "(target)" } else { "(parent, target)" };
        let _ = writeln!(s, "- {}{}", p.as_str(), sig);
    }
    s.push_str("Group placeholders `group:<category>` stand for every object of that category.\n");
    s.push_str("Objects cannot be put into, or taken out of, a closed container; open it first.\n");
    s.push_str("Follow the listed preferences, and repair the failures listed under FEEDBACK.\n");
    let task = match stage {
        Stage::Categorize => "Task: sort every movable object into exactly one category.\nAnswer with a GROUPS block, nothing else:\nGROUPS\ncategory: id, id\nEND",
        Stage::Intergroup => "Task: place each category as a whole with put_on, put_in or put_near on group placeholders, adding an orientation only when a preference asks for one.",
        Stage::Intragroup => "Task: arrange the objects of the group named under INPUT relative to each other.",
        Stage::Replan => "Task: rewrite the previous PLAN as a complete new plan that avoids every failure under FEEDBACK and respects every preference.",
        Stage::SummarizeAdjustment => "Task: a person edited the scene as listed under INPUT; state the preference behind the edit in one sentence.\nAnswer with exactly two lines:\nPREFERENCE: <sentence>\nTAGS: tag, tag",
        Stage::Profile => "Task: merge the records under INPUT into fewer, more general preferences, each citing at least two record ids.\nAnswer with a PROFILES block, nothing else:\nPROFILES\nid, id: <sentence>\nEND",
    };
    s.push_str(task);
    s.push('\n');
    if matches!(stage, Stage::Intergroup | Stage::Intragroup | Stage::Replan) {
        s.push_str(GRAMMAR_STEPS);
        s.push('\n');
    }
    s
}

fn relation_line(r: &Relation) -> String {
    match r.step_index {
        Some(i) => format!("{r} [{}@{i}]", r.source.as_str()),
        None => format!("{r} [{}]", r.source.as_str()),
    }
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Serializes the scene as `object` and `relation` lines.
pub fn scene_lines(g: &SceneGraph, out: &mut String) {
    for n in g.nodes.values() {
        let kind = if n.is_base {
            "base"
        } else if n.is_container {
            "container"
        } else {
            "movable"
        };
        let _ = write!(out, "object {}: label={}", n.id, n.label);
        if !n.category.is_empty() {
            let _ = write!(out, ", category={}", n.category);
        }
        let _ = write!(out, ", type={kind}");
        if n.is_container {
            let _ = write!(out, ", container=true");
        }
        for (k, v) in &n.states {
            let _ = write!(out, ", {k}={v}");
        }
        let [x, y, z] = n.half_extents;
        let _ = writeln!(out, ", size={:.2}x{:.2}x{:.2}, mass={:.2}", 2.0 * x, 2.0 * y, 2.0 * z, n.mass);
    }
    for r in &g.edges {
        let _ = writeln!(out, "relation {}", relation_line(r));
    }
    for r in &g.category_edges {
        let _ = writeln!(out, "relation {}", relation_line(r));
    }
}

fn feedback_lines(events: &[FeedbackEvent], out: &mut String) {
    for e in events {
        let origin = match e.origin {
            crate::feedback::Origin::Synthesizer => "synthesizer",
            crate::feedback::Origin::Executor => "executor",
            crate::feedback::Origin::Human => "human",
        };
        match &e.payload {
            FeedbackPayload::Physical(d) => {
                let _ = write!(out, "event {} from {origin}: {}", e.kind.as_str(), d.code);
                if let Some(step) = d.step {
                    let _ = write!(out, " at step {step}");
                }
                if !d.object_ids.is_empty() {
                    let _ = write!(out, " involving {}", d.object_ids.join(", "));
                }
                out.push('\n');
                for r in &d.relations {
                    let _ = writeln!(out, "  relation {}", relation_line(r));
                }
            }
            FeedbackPayload::Text { text } => {
                let _ = writeln!(out, "event {} from {origin}: {}", e.kind.as_str(), one_line(text));
            }
            FeedbackPayload::Adjustment { text, changes } => {
                let _ = writeln!(out, "event {} from {origin}: {}", e.kind.as_str(), one_line(text));
                for c in changes {
                    let _ = writeln!(out, "  {}", change_line(c));
                }
            }
        }
    }
}

pub fn change_line(c: &RelationChange) -> String {
    match c {
        RelationChange::Added { relation } => format!("change added {}", relation_line(relation)),
        RelationChange::Removed { relation } => format!("change removed {}", relation_line(relation)),
        RelationChange::StateFlip { id, state, value } => format!("change state {id} {state}={value}"),
        RelationChange::PoseChanged { id, .. } => format!("change pose {id}"),
    }
}

/// Builds the prompt. Sections always appear in the same order with their
/// markers, empty when there is nothing to say.
pub fn assemble(stage: Stage, input: &PromptInput<'_>, ceiling: usize) -> Result<PromptBundle, PromptError> {
    let mut c = String::new();
    c.push_str("[SCENE]\n");
    scene_lines(input.scene, &mut c);
    c.push_str("[INSTRUCTION]\n");
    if !input.instruction.trim().is_empty() {
        let _ = writeln!(c, "{}", one_line(input.instruction));
    }
    c.push_str("[PREFERENCES]\n");
    let mut pref_tokens = 0;
    for p in input.preferences {
        let _ = writeln!(c, "{} ({}): {}", p.id, p.source.as_str(), one_line(&p.text));
        pref_tokens += p.token_estimate();
    }
    c.push_str("[FEEDBACK]\n");
    feedback_lines(input.feedback, &mut c);
    c.push_str("[GROUPS]\n");
    for g in &input.scene.groups {
        let _ = writeln!(c, "{}: {}", g.category, g.member_ids.join(", "));
    }
    c.push_str("[PLAN]\n");
    for s in input.plan.unwrap_or_default() {
        let _ = writeln!(c, "{s}");
    }
    c.push_str("[INPUT]\n");
    match input.focus {
        Focus::None => {}
        Focus::Group(cat) => {
            let _ = writeln!(c, "group {cat}");
        }
        Focus::Changes(changes) => {
            for ch in changes {
                let _ = writeln!(c, "{}", change_line(ch));
            }
        }
        Focus::Records(records) => {
            for r in records {
                let _ = writeln!(c, "record {}: {}", r.id, one_line(&r.text));
            }
        }
    }
    c.push_str("[END]\n");
    let bundle = PromptBundle { stage, system: system_text(stage), context: c };
    if pref_tokens > ceiling {
        return Err(PromptError::PreferencesOverCeiling { estimate: pref_tokens, ceiling });
    }
    let estimate = bundle.token_estimate();
    if estimate > ceiling {
        return Err(PromptError::CeilingExceeded { estimate, ceiling });
    }
    Ok(bundle)
}

// ---- backends ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCompletion {
    pub raw: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub raw: String,
    pub parsed: StagePayload,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("backend timed out")]
    Timeout,
    #[error("http error: {0}")]
    Http(String),
    #[error("unparseable output: {0}")]
    Parse(#[from] ParseError),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

pub trait PlannerBackend: Send + Sync {
    fn name(&self) -> &str;
    fn complete_raw(&self, bundle: &PromptBundle) -> Result<RawCompletion, BackendError>;
}

/// One backend call with its output checked against the stage grammar.
pub fn complete(backend: &dyn PlannerBackend, bundle: &PromptBundle) -> Result<BackendResponse, BackendError> {
    let RawCompletion { raw, usage } = backend.complete_raw(bundle)?;
    let parsed = parse_stage_output(&raw, bundle.stage)?;
    Ok(BackendResponse { raw, parsed, usage })
}

/// Transcript entry for one backend call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub id: usize,
    pub iteration: usize,
    pub stage: Stage,
    pub attempt: usize,
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CallError {
    #[error(transparent)]
    Backend(BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("malformed {stage:?} response after retries: {message}")]
    Malformed { stage: Stage, message: String },
}

/// Issues calls with the retry policy and logs each attempt.
pub struct Caller<'a> {
    pub backend: &'a dyn PlannerBackend,
    pub log: &'a mut Vec<CallRecord>,
    pub ceiling: usize,
    pub retries: usize,
    pub iteration: usize,
}

impl<'a> Caller<'a> {
    pub fn new(backend: &'a dyn PlannerBackend, log: &'a mut Vec<CallRecord>) -> Self {
        Self { backend, log, ceiling: DEFAULT_PROMPT_CEILING, retries: DEFAULT_RETRIES, iteration: 0 }
    }

    /// Assembles, calls and validates; on a grammar or validation failure
    /// re-prompts up to `retries` times with the error appended. Returns the
    /// validated value and the id of the accepted call.
    pub fn call<T>(
        &mut self,
        stage: Stage,
        input: &PromptInput<'_>,
        validate: impl Fn(&StagePayload) -> Result<T, String>,
    ) -> Result<(T, usize), CallError> {
        let base = assemble(stage, input, self.ceiling)?;
        let mut bundle = base.clone();
        let mut last = String::new();
        for attempt in 0..=self.retries {
            let id = self.log.len();
            let mut record = CallRecord {
                id,
                iteration: self.iteration,
                stage,
                attempt,
                context: bundle.context.clone(),
                raw: None,
                error: None,
                usage: Usage::default(),
            };
            let result = self.backend.complete_raw(&bundle);
            let completion = match result {
                Ok(c) => c,
                Err(e) => {
                    record.error = Some(format!("{e}"));
                    self.log.push(record);
                    return Err(CallError::Backend(e));
                }
            };
            record.raw = Some(completion.raw.clone());
            record.usage = completion.usage;
            let verdict =
                parse_stage_output(&completion.raw, stage).map_err(|e| format!("{e}")).and_then(|p| validate(&p));
            match verdict {
                Ok(value) => {
                    self.log.push(record);
                    return Ok((value, id));
                }
                Err(message) => {
                    record.error = Some(message.clone());
                    self.log.push(record);
                    last = message;
                }
            }
            bundle = base.with_retry(&last);
        }
        Err(CallError::Malformed { stage, message: last })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preference::PreferenceStore;
    use crate::scene_graph::{ObjectNode, RelationKind};
    use core::sync::atomic::{AtomicUsize, Ordering};

    fn scene() -> SceneGraph {
        SceneGraph::new()
            .with_node(ObjectNode::base("table", "table", [0.6, 0.4, 0.02], 20.0))
            .with_node(ObjectNode::new("mug", "mug", [0.04, 0.04, 0.05], 0.3))
            .with_edge(Relation::observed(RelationKind::On, "table", "mug"))
    }

    fn input<'a>(g: &'a SceneGraph, prefs: &'a [PreferenceRecord], fb: &'a [FeedbackEvent]) -> PromptInput<'a> {
        PromptInput {
            scene: g,
            instruction: "Tidy the table.",
            preferences: prefs,
            feedback: fb,
            plan: None,
            focus: Focus::None,
        }
    }

    #[test]
    fn markers_present_without_content() {
        let g = scene();
        let b = assemble(Stage::Categorize, &input(&g, &[], &[]), DEFAULT_PROMPT_CEILING).unwrap();
        assert!(b.context.contains("[PREFERENCES]\n[FEEDBACK]\n[GROUPS]\n"));
        assert!(b.system.contains("STAGE: categorize"));
        assert!(b.context.contains("relation on(table, mug) [initial_observation]"));
    }

    #[test]
    fn preferences_appear_once_in_order() {
        let g = scene();
        let mut store = PreferenceStore::default();
        store.ingest_instruction("no stacking", 1).unwrap();
        store.ingest_instruction("books on the left", 2).unwrap();
        let prefs = store.active_cloned();
        let b = assemble(Stage::Intergroup, &input(&g, &prefs, &[]), DEFAULT_PROMPT_CEILING).unwrap();
        let a = b.context.find("books on the left").unwrap();
        let z = b.context.find("no stacking").unwrap();
        assert!(a < z);
        assert_eq!(b.context.matches("no stacking").count(), 1);
        let again = assemble(Stage::Intergroup, &input(&g, &prefs, &[]), DEFAULT_PROMPT_CEILING).unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn ceiling_enforced() {
        let g = scene();
        let mut store = PreferenceStore::new(1_000_000);
        store.ingest_instruction(&"x".repeat(400), 1).unwrap();
        let prefs = store.active_cloned();
        assert!(matches!(
            assemble(Stage::Categorize, &input(&g, &prefs, &[]), 50),
            Err(PromptError::PreferencesOverCeiling { .. })
        ));
        assert!(matches!(
            assemble(Stage::Categorize, &input(&g, &[], &[]), 50),
            Err(PromptError::CeilingExceeded { .. })
        ));
    }

    struct Canned(Vec<&'static str>, AtomicUsize);

    impl PlannerBackend for Canned {
        fn name(&self) -> &str {
            "canned"
        }
        fn complete_raw(&self, _: &PromptBundle) -> Result<RawCompletion, BackendError> {
            let i = self.1.fetch_add(1, Ordering::Relaxed);
            Ok(RawCompletion { raw: self.0[i.min(self.0.len() - 1)].into(), usage: Usage::default() })
        }
    }

    #[test]
    fn retries_then_malformed() {
        let g = scene();
        let backend = Canned(alloc::vec!["nonsense", "GROUPS\nmisc: mug\nEND"], AtomicUsize::new(0));
        let mut log = Vec::new();
        let mut caller = Caller::new(&backend, &mut log);
        let (v, id) = caller.call(Stage::Categorize, &input(&g, &[], &[]), |p| Ok(p.clone())).unwrap();
        assert_eq!(id, 1);
        assert!(matches!(v, StagePayload::Groups(_)));
        assert!(log[1].context.contains("[RETRY]"));

        let backend = Canned(alloc::vec!["nonsense"], AtomicUsize::new(0));
        let mut log = Vec::new();
        let mut caller = Caller::new(&backend, &mut log);
        let r = caller.call(Stage::Categorize, &input(&g, &[], &[]), |p| Ok(p.clone()));
        assert!(matches!(r, Err(CallError::Malformed { .. })));
        assert_eq!(log.len(), 3);
    }
}
