//! Top-down task planning: categorize, place groups, order operations inside
//! groups, check plans against the symbolic rules, and regenerate plans when
//! feedback arrives.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::feedback::FeedbackEvent;
use crate::llm_backend::{CallError, Caller, Focus, PromptInput, Stage, StagePayload};
use crate::preference::PreferenceRecord;
use crate::scene_graph::{
    group_placeholder, placeholder_category, GroupDag, NodeId, Relation, RelationKind, RelationSource, SceneGraph,
    OPEN, SLICED,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Group,
    PutOn,
    PutIn,
    PutNear,
    Open,
    Close,
    Slice,
}

impl Primitive {
    pub const ALL: [Primitive; 7] = [
        Primitive::Group,
        Primitive::PutOn,
        Primitive::PutIn,
        Primitive::PutNear,
        Primitive::Open,
        Primitive::Close,
        Primitive::Slice,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Primitive::Group => "group",
            Primitive::PutOn => "put_on",
            Primitive::PutIn => "put_in",
            Primitive::PutNear => "put_near",
            Primitive::Open => "open",
            Primitive::Close => "close",
            Primitive::Slice => "slice",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }

    pub fn arity(self) -> usize {
        match self {
            Primitive::Open | Primitive::Close | Primitive::Slice => 1,
            _ => 2,
        }
    }

    pub fn default_relation(self) -> Option<RelationKind> {
        match self {
            Primitive::PutOn => Some(RelationKind::On),
            Primitive::PutIn => Some(RelationKind::In),
            Primitive::PutNear | Primitive::Group => Some(RelationKind::Near),
            _ => None,
        }
    }

    /// Whether `kind` may be attached to a step of this primitive.
    pub fn accepts(self, kind: RelationKind) -> bool {
        match self {
            Primitive::PutOn => kind == RelationKind::On,
            Primitive::PutIn => kind == RelationKind::In,
            Primitive::PutNear => kind == RelationKind::Near || kind.is_orientation(),
            Primitive::Group => kind == RelationKind::Near,
            _ => false,
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One action. Binary primitives take `(parent, target)`: `put_in(box, cup)`
/// puts the cup into the box, matching the relation `in(box, cup)` it creates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionStep {
    pub primitive: Primitive,
    pub args: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<RelationKind>,
}

impl ActionStep {
    pub fn new(primitive: Primitive, args: &[&str]) -> Self {
        Self { primitive, args: args.iter().map(|a| a.to_string()).collect(), relation: None }
    }

    pub fn binary(primitive: Primitive, parent: &str, target: &str) -> Self {
        Self::new(primitive, &[parent, target])
    }

    pub fn unary(primitive: Primitive, target: &str) -> Self {
        Self::new(primitive, &[target])
    }

    pub fn with_relation(mut self, kind: RelationKind) -> Self {
        self.relation = Some(kind);
        self
    }

    pub fn parent(&self) -> Option<&str> {
        (self.args.len() == 2).then(|| self.args[0].as_str())
    }

    pub fn target(&self) -> &str {
        self.args.last().map_or("", String::as_str)
    }

    pub fn effective_relation(&self) -> Option<RelationKind> {
        self.relation.or(self.primitive.default_relation())
    }

    /// The relation this step intends to create, tagged with its provenance.
    pub fn resulting_relation(&self, step: usize) -> Option<Relation> {
        let kind = self.effective_relation()?;
        let mut r = Relation::new(kind, self.parent()?, self.target(), RelationSource::Planner);
        r.step_index = Some(step);
        Some(r)
    }

    /// Arity or relation-kind problems, if any.
    pub fn shape_error(&self) -> Option<String> {
        if self.args.len() != self.primitive.arity() {
            return Some(format!(
                "{} takes {} argument(s), got {}",
                self.primitive,
                self.primitive.arity(),
                self.args.len()
            ));
        }
        match self.relation {
            Some(kind) if !self.primitive.accepts(kind) => {
                Some(format!("{} cannot produce a `{}` relation", self.primitive, kind))
            }
            _ => None,
        }
    }

    pub fn mentions(&self, id: &str) -> bool {
        self.args.iter().any(|a| a == id)
    }
}

impl fmt::Display for ActionStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.primitive)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            f.write_str(a)?;
        }
        f.write_str(")")?;
        if let Some(kind) = self.relation {
            write!(f, " -> {kind}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub prompt_id: String,
    pub response_id: String,
}

impl Provenance {
    pub fn from_call(call: usize) -> Self {
        Self { prompt_id: format!("prompt-{call}"), response_id: format!("response-{call}") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<ActionStep>,
    pub goal: SceneGraph,
    #[serde(default)]
    pub provenance: BTreeMap<usize, Provenance>,
}

impl Plan {
    /// Builds the plan whose goal is the intended effect of `steps` on `initial`.
    pub fn new(initial: &SceneGraph, steps: Vec<ActionStep>, provenance: BTreeMap<usize, Provenance>) -> Self {
        let goal = derive_goal(initial, &steps);
        Self { steps, goal, provenance }
    }
}

// ---- executor ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "code")]
pub enum LogicalError {
    #[error("step {step}: {message}")]
    Format { step: usize, message: String },
    #[error("step {step}: {primitive} takes {expected} argument(s), got {got}")]
    Arity { step: usize, primitive: Primitive, expected: usize, got: usize },
    #[error("step {step}: unknown primitive `{token}`")]
    UnknownPrimitive { step: usize, token: String },
    #[error("step {step}: unknown object `{id}`")]
    UnknownId { step: usize, id: NodeId },
    #[error("step {step}: unknown group `{id}`")]
    UnknownGroup { step: usize, id: NodeId },
    #[error("step {step}: group placeholders cannot be combined with objects this way")]
    GroupMismatch { step: usize },
    #[error("step {step}: `{id}` is not a container")]
    NotAContainer { step: usize, id: NodeId },
    #[error("step {step}: base `{id}` cannot be moved")]
    BaseNotMovable { step: usize, id: NodeId },
    #[error("step {step}: `{id}` cannot act on itself")]
    SelfReference { step: usize, id: NodeId },
    #[error("final scene differs from the plan goal")]
    GoalMismatch,
}

impl LogicalError {
    pub fn code(&self) -> &'static str {
        match self {
            LogicalError::Format { .. } => "Format",
            LogicalError::Arity { .. } => "Arity",
            LogicalError::UnknownPrimitive { .. } => "UnknownPrimitive",
            LogicalError::UnknownId { .. } => "UnknownId",
            LogicalError::UnknownGroup { .. } => "UnknownGroup",
            LogicalError::GroupMismatch { .. } => "GroupMismatch",
            LogicalError::NotAContainer { .. } => "NotAContainer",
            LogicalError::BaseNotMovable { .. } => "BaseNotMovable",
            LogicalError::SelfReference { .. } => "SelfReference",
            LogicalError::GoalMismatch => "GoalMismatch",
        }
    }

    pub fn step(&self) -> Option<usize> {
        match self {
            LogicalError::Format { step, .. }
            | LogicalError::Arity { step, .. }
            | LogicalError::UnknownPrimitive { step, .. }
            | LogicalError::UnknownId { step, .. }
            | LogicalError::UnknownGroup { step, .. }
            | LogicalError::GroupMismatch { step }
            | LogicalError::NotAContainer { step, .. }
            | LogicalError::BaseNotMovable { step, .. }
            | LogicalError::SelfReference { step, .. } => Some(*step),
            LogicalError::GoalMismatch => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "code")]
pub enum PhysicalError {
    #[error("step {step}: container `{container}` is closed (object `{object}`)")]
    ContainerClosed { step: usize, container: NodeId, object: NodeId },
    #[error("step {step}: `{parent}` is inside closed container `{container}`")]
    ParentInClosedContainer { step: usize, parent: NodeId, container: NodeId },
    #[error("step {step}: placing `{child}` on `{parent}` would create a support cycle")]
    SupportCycle { step: usize, parent: NodeId, child: NodeId },
    #[error("step {step}: `{id}` is already open")]
    AlreadyOpen { step: usize, id: NodeId },
    #[error("step {step}: `{id}` is already closed")]
    AlreadyClosed { step: usize, id: NodeId },
}

impl PhysicalError {
    pub fn code(&self) -> &'static str {
        match self {
            PhysicalError::ContainerClosed { .. } => "ContainerClosed",
            PhysicalError::ParentInClosedContainer { .. } => "ParentInClosedContainer",
            PhysicalError::SupportCycle { .. } => "SupportCycle",
            PhysicalError::AlreadyOpen { .. } => "AlreadyOpen",
            PhysicalError::AlreadyClosed { .. } => "AlreadyClosed",
        }
    }

    pub fn step(&self) -> usize {
        match self {
            PhysicalError::ContainerClosed { step, .. }
            | PhysicalError::ParentInClosedContainer { step, .. }
            | PhysicalError::SupportCycle { step, .. }
            | PhysicalError::AlreadyOpen { step, .. }
            | PhysicalError::AlreadyClosed { step, .. } => *step,
        }
    }

    /// Offending objects: the container (or parent) first.
    pub fn object_ids(&self) -> Vec<NodeId> {
        match self {
            PhysicalError::ContainerClosed { container, object, .. } => alloc::vec![container.clone(), object.clone()],
            PhysicalError::ParentInClosedContainer { parent, container, .. } => {
                alloc::vec![container.clone(), parent.clone()]
            }
            PhysicalError::SupportCycle { parent, child, .. } => alloc::vec![parent.clone(), child.clone()],
            PhysicalError::AlreadyOpen { id, .. } | PhysicalError::AlreadyClosed { id, .. } => alloc::vec![id.clone()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub ok: bool,
    pub failed_step: Option<usize>,
    pub events: Vec<FeedbackEvent>,
    pub logical_errors: Vec<LogicalError>,
    pub physical_errors: Vec<PhysicalError>,
    pub final_scene: SceneGraph,
}

impl ExecutionOutcome {
    /// The failing step and the error codes raised there, used to detect a
    /// replan that repeats the same failure.
    pub fn failure_signature(&self, plan: &Plan) -> Option<(ActionStep, Vec<&'static str>)> {
        let step = self.failed_step?;
        let mut codes: Vec<&'static str> = self
            .logical_errors
            .iter()
            .filter(|e| e.step() == Some(step))
            .map(LogicalError::code)
            .chain(self.physical_errors.iter().filter(|e| e.step() == step).map(PhysicalError::code))
            .collect();
        codes.sort_unstable();
        codes.dedup();
        Some((plan.steps.get(step)?.clone(), codes))
    }
}

/// Replays `plan` against a copy of `initial`. When `initial` carries no
/// groups, the plan's groups are used to resolve placeholders.
pub fn execute_symbolically(initial: &SceneGraph, plan: &Plan) -> ExecutionOutcome {
    let mut sim = if initial.groups.is_empty() && !plan.goal.groups.is_empty() {
        Simulator::new(&planning_scene(initial, plan), true)
    } else {
        Simulator::new(initial, true)
    };
    for (i, step) in plan.steps.iter().enumerate() {
        sim.apply(i, step);
    }
    let Simulator { scene, mut logical, physical, mut events, .. } = sim;
    if logical.is_empty() && physical.is_empty() && !scene.same_relations_and_states(&plan.goal) {
        logical.push(LogicalError::GoalMismatch);
        events.push(FeedbackEvent::precondition("GoalMismatch", None, Vec::new(), Vec::new()));
    }
    let failed_step =
        logical.iter().filter_map(LogicalError::step).chain(physical.iter().map(PhysicalError::step)).min();
    ExecutionOutcome {
        ok: logical.is_empty() && physical.is_empty(),
        failed_step,
        events,
        logical_errors: logical,
        physical_errors: physical,
        final_scene: scene,
    }
}

/// Intended end state of `steps`: effects applied with physical
/// preconditions ignored. Steps that are malformed or would close a support
/// cycle are skipped.
pub fn derive_goal(initial: &SceneGraph, steps: &[ActionStep]) -> SceneGraph {
    let mut sim = Simulator::new(initial, false);
    for (i, step) in steps.iter().enumerate() {
        sim.apply(i, step);
    }
    let mut goal = sim.scene;
    refresh_group_edges(&mut goal);
    goal
}

/// Sets each group's `intra_edges` to the goal relations among its members.
fn refresh_group_edges(g: &mut SceneGraph) {
    let edges = g.edges.clone();
    for group in &mut g.groups {
        group.intra_edges = edges
            .iter()
            .filter(|e| group.member_ids.contains(&e.parent) && group.member_ids.contains(&e.child))
            .cloned()
            .collect();
    }
}

struct Simulator {
    scene: SceneGraph,
    enforce: bool,
    logical: Vec<LogicalError>,
    physical: Vec<PhysicalError>,
    events: Vec<FeedbackEvent>,
}

enum Arg<'a> {
    Object(&'a str),
    Group(&'a str),
}

impl Simulator {
    fn new(initial: &SceneGraph, enforce: bool) -> Self {
        Self { scene: initial.clone(), enforce, logical: Vec::new(), physical: Vec::new(), events: Vec::new() }
    }

    fn logical_error(&mut self, e: LogicalError, step: &ActionStep, index: usize) {
        let ids = step.args.clone();
        let rels = step.resulting_relation(index).into_iter().collect();
        self.events.push(FeedbackEvent::precondition(e.code(), Some(index), ids, rels));
        self.logical.push(e);
    }

    fn physical_error(&mut self, e: PhysicalError, attempted: Option<Relation>) {
        let ids = e.object_ids();
        let mut rels: Vec<Relation> = attempted.into_iter().collect();
        rels.extend(self.scene.edges.iter().filter(|r| ids.iter().any(|id| r.touches(id))).cloned());
        self.events.push(FeedbackEvent::precondition(e.code(), Some(e.step()), ids, rels));
        self.physical.push(e);
    }

    fn classify<'a>(&self, id: &'a str) -> Option<Arg<'a>> {
        match placeholder_category(id) {
            Some(cat) => self.scene.group(cat).map(|_| Arg::Group(id)),
            None => self.scene.contains(id).then_some(Arg::Object(id)),
        }
    }

    fn members(&self, placeholder: &str) -> Vec<NodeId> {
        let cat = placeholder_category(placeholder).unwrap_or_default();
        self.scene
            .group(cat)
            .map(|g| {
                g.member_ids.iter().filter(|m| self.scene.node(m).is_some_and(|n| n.is_movable())).cloned().collect()
            })
            .unwrap_or_default()
    }

    fn closed_container_holding(&self, id: &str) -> Option<NodeId> {
        self.scene
            .support_chain(id)
            .iter()
            .find(|r| r.kind == RelationKind::In && !self.scene.node(&r.parent).is_some_and(|n| n.is_open()))
            .map(|r| r.parent.clone())
    }

    fn apply(&mut self, index: usize, step: &ActionStep) {
        if step.args.len() != step.primitive.arity() {
            let e = LogicalError::Arity {
                step: index,
                primitive: step.primitive,
                expected: step.primitive.arity(),
                got: step.args.len(),
            };
            return self.logical_error(e, step, index);
        }
        if let Some(message) = step.shape_error() {
            return self.logical_error(LogicalError::Format { step: index, message }, step, index);
        }
        for a in &step.args {
            if self.classify(a).is_none() {
                let e = if placeholder_category(a).is_some() {
                    LogicalError::UnknownGroup { step: index, id: a.clone() }
                } else {
                    LogicalError::UnknownId { step: index, id: a.clone() }
                };
                return self.logical_error(e, step, index);
            }
        }
        match step.primitive {
            Primitive::Open | Primitive::Close | Primitive::Slice => self.apply_unary(index, step),
            _ => self.apply_binary(index, step),
        }
    }

    fn apply_unary(&mut self, index: usize, step: &ActionStep) {
        let id = step.target().to_string();
        if placeholder_category(&id).is_some() {
            return self.logical_error(LogicalError::GroupMismatch { step: index }, step, index);
        }
        let node = &self.scene.nodes[&id];
        match step.primitive {
            Primitive::Slice => {
                if node.is_base {
                    return self.logical_error(LogicalError::BaseNotMovable { step: index, id }, step, index);
                }
                self.scene.nodes.get_mut(&id).expect("checked").states.insert(SLICED.into(), true);
            }
            _ => {
                if !node.is_container {
                    return self.logical_error(LogicalError::NotAContainer { step: index, id }, step, index);
                }
                let opening = step.primitive == Primitive::Open;
                if self.enforce && node.is_open() == opening {
                    let e = if opening {
                        PhysicalError::AlreadyOpen { step: index, id }
                    } else {
                        PhysicalError::AlreadyClosed { step: index, id }
                    };
                    return self.physical_error(e, None);
                }
                self.scene.nodes.get_mut(&id).expect("checked").states.insert(OPEN.into(), opening);
            }
        }
    }

    fn apply_binary(&mut self, index: usize, step: &ActionStep) {
        let parent = step.args[0].as_str();
        let target = step.args[1].as_str();
        if parent == target {
            return self.logical_error(LogicalError::SelfReference { step: index, id: target.into() }, step, index);
        }
        let kind = step.effective_relation().expect("binary primitives carry a relation");
        match (self.classify(parent).expect("checked"), self.classify(target).expect("checked")) {
            (Arg::Group(p), Arg::Group(c)) => {
                if !matches!(step.primitive, Primitive::PutNear | Primitive::Group) {
                    return self.logical_error(LogicalError::GroupMismatch { step: index }, step, index);
                }
                self.scene.category_edges.retain(|e| !(e.touches(p) && e.touches(c)));
                let mut rel = Relation::new(kind, p, c, RelationSource::Planner);
                rel.step_index = Some(index);
                self.scene.category_edges.push(rel);
            }
            (Arg::Group(_), Arg::Object(_)) => {
                self.logical_error(LogicalError::GroupMismatch { step: index }, step, index);
            }
            (Arg::Object(p), Arg::Group(c)) => {
                for member in self.members(c) {
                    if member != p {
                        self.place_one(index, step, p, &member, kind);
                    }
                }
            }
            (Arg::Object(p), Arg::Object(c)) => {
                if self.scene.nodes[c].is_base {
                    return self.logical_error(LogicalError::BaseNotMovable { step: index, id: c.into() }, step, index);
                }
                if step.primitive == Primitive::PutIn && !self.scene.nodes[p].is_container {
                    return self.logical_error(LogicalError::NotAContainer { step: index, id: p.into() }, step, index);
                }
                self.place_one(index, step, p, c, kind);
            }
        }
    }

    fn place_one(&mut self, index: usize, step: &ActionStep, parent: &str, child: &str, kind: RelationKind) {
        if self.scene.nodes[child].is_base {
            return;
        }
        match step.primitive {
            Primitive::PutOn | Primitive::PutIn => {
                if step.primitive == Primitive::PutIn && !self.scene.nodes[parent].is_container {
                    return self.logical_error(
                        LogicalError::NotAContainer { step: index, id: parent.into() },
                        step,
                        index,
                    );
                }
                self.support(index, kind, parent, child);
            }
            _ => {
                // side-by-side: share the parent's support, then record the relation
                if let Some(s) = self.scene.support_of(parent).cloned() {
                    if !self.support(index, s.kind, &s.parent, child) {
                        return;
                    }
                }
                self.scene.edges.retain(|e| e.kind.is_support() || !(e.touches(parent) && e.touches(child)));
                let mut rel = Relation::new(kind, parent, child, RelationSource::Planner);
                rel.step_index = Some(index);
                self.scene.edges.push(rel);
            }
        }
    }

    /// Moves `child` onto/into `parent`; false when a precondition failed.
    fn support(&mut self, index: usize, kind: RelationKind, parent: &str, child: &str) -> bool {
        let mut attempted = Relation::new(kind, parent, child, RelationSource::Planner);
        attempted.step_index = Some(index);
        if self.enforce {
            if let Some(container) = self.closed_container_holding(child) {
                let e = PhysicalError::ContainerClosed { step: index, container, object: child.into() };
                self.physical_error(e, Some(attempted));
                return false;
            }
            if kind == RelationKind::In && !self.scene.nodes[parent].is_open() {
                let e = PhysicalError::ContainerClosed { step: index, container: parent.into(), object: child.into() };
                self.physical_error(e, Some(attempted));
                return false;
            }
            if let Some(container) = self.closed_container_holding(parent) {
                let e = PhysicalError::ParentInClosedContainer { step: index, parent: parent.into(), container };
                self.physical_error(e, Some(attempted));
                return false;
            }
        }
        if self.scene.is_supported_by(parent, child) {
            if self.enforce {
                let e = PhysicalError::SupportCycle { step: index, parent: parent.into(), child: child.into() };
                self.physical_error(e, Some(attempted));
            }
            return false;
        }
        self.scene.edges.retain(|e| !(e.kind.is_support() && e.child == child));
        self.scene.edges.push(attempted);
        true
    }
}

// ---- LLM-driven stages ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlannerError {
    #[error("no movable objects to plan for")]
    NoObjects,
    #[error("nothing to repair: the last outcome was ok and no feedback is pending")]
    NothingToRepair,
    #[error(transparent)]
    Call(#[from] CallError),
}

/// Inputs shared by every stage of one planning pass.
#[derive(Debug, Clone, Copy)]
pub struct TaskContext<'a> {
    pub instruction: &'a str,
    /// Active preferences, already in prompt order.
    pub preferences: &'a [PreferenceRecord],
    /// Pending events not yet shown to the planner.
    pub feedback: &'a [FeedbackEvent],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorization {
    pub groups: Vec<GroupDag>,
    /// Nodes of the category-level graph: one placeholder per group.
    pub category_nodes: Vec<NodeId>,
}

impl Categorization {
    /// Copy of `g` carrying the groups, with each member's category set.
    pub fn apply_to(&self, g: &SceneGraph) -> SceneGraph {
        let mut out = g.clone();
        for group in &self.groups {
            for id in &group.member_ids {
                if let Some(n) = out.nodes.get_mut(id) {
                    n.category = group.category.clone();
                }
            }
        }
        out.groups = self.groups.clone();
        out.category_edges.clear();
        out
    }
}

fn input<'a>(
    scene: &'a SceneGraph,
    ctx: &TaskContext<'a>,
    plan: Option<&'a [ActionStep]>,
    focus: Focus<'a>,
) -> PromptInput<'a> {
    PromptInput {
        scene,
        instruction: ctx.instruction,
        preferences: ctx.preferences,
        feedback: ctx.feedback,
        plan,
        focus,
    }
}

/// Partitions the movable objects into categories.
pub fn categorize(
    scene: &SceneGraph,
    ctx: &TaskContext<'_>,
    caller: &mut Caller<'_>,
) -> Result<Categorization, PlannerError> {
    let objects: BTreeSet<&str> = scene.nodes.values().filter(|n| n.is_movable()).map(|n| n.id.as_str()).collect();
    if objects.is_empty() {
        return Err(PlannerError::NoObjects);
    }
    let (groups, _) = caller.call(Stage::Categorize, &input(scene, ctx, None, Focus::None), |payload| {
        let StagePayload::Groups(groups) = payload else {
            return Err("expected a GROUPS block".into());
        };
        let mut seen = BTreeSet::new();
        let mut cats = BTreeSet::new();
        for (cat, members) in groups {
            if !cats.insert(cat.as_str()) {
                return Err(format!("category `{cat}` listed twice"));
            }
            for m in members {
                if !objects.contains(m.as_str()) {
                    return Err(format!("`{m}` is not a movable object of the scene"));
                }
                if !seen.insert(m.as_str()) {
                    return Err(format!("`{m}` appears in more than one group"));
                }
            }
        }
        if let Some(missing) = objects.iter().find(|o| !seen.contains(*o)) {
            return Err(format!("`{missing}` is not assigned to any group"));
        }
        Ok(groups.clone())
    })?;
    let groups: Vec<GroupDag> = groups
        .into_iter()
        .map(|(category, member_ids)| GroupDag { category, member_ids, intra_edges: Vec::new() })
        .collect();
    let category_nodes = groups.iter().map(GroupDag::placeholder).collect();
    Ok(Categorization { groups, category_nodes })
}

fn check_steps(steps: &[ActionStep], allowed: impl Fn(&str) -> bool) -> Result<(), String> {
    for (i, s) in steps.iter().enumerate() {
        if let Some(e) = s.shape_error() {
            return Err(format!("step {i}: {e}"));
        }
        if let Some(a) = s.args.iter().find(|a| !allowed(a)) {
            return Err(format!("step {i}: `{a}` may not appear here"));
        }
    }
    Ok(())
}

fn steps_payload(payload: &StagePayload) -> Result<&Vec<ActionStep>, String> {
    match payload {
        StagePayload::Steps(steps) => Ok(steps),
        _ => Err("expected a STEPS block".into()),
    }
}

/// Group-level placement: steps over placeholders, bases and containers.
pub fn plan_intergroup(
    scene: &SceneGraph,
    ctx: &TaskContext<'_>,
    caller: &mut Caller<'_>,
) -> Result<(Vec<ActionStep>, usize), PlannerError> {
    let allowed = |id: &str| match placeholder_category(id) {
        Some(cat) => scene.group(cat).is_some(),
        None => scene.node(id).is_some_and(|n| n.is_base || n.is_container),
    };
    let (steps, call) = caller.call(Stage::Intergroup, &input(scene, ctx, None, Focus::None), |p| {
        let steps = steps_payload(p)?;
        check_steps(steps, allowed)?;
        Ok(steps.clone())
    })?;
    Ok((steps, call))
}

/// Operations among the members of one group. Singletons need none and
/// skip the backend call.
pub fn plan_intragroup(
    scene: &SceneGraph,
    group: &GroupDag,
    ctx: &TaskContext<'_>,
    caller: &mut Caller<'_>,
) -> Result<(Vec<ActionStep>, Option<usize>), PlannerError> {
    if group.member_ids.len() < 2 {
        return Ok((Vec::new(), None));
    }
    let allowed = |id: &str| {
        group.member_ids.iter().any(|m| m == id) || scene.node(id).is_some_and(|n| n.is_base || n.is_container)
    };
    let (steps, call) =
        caller.call(Stage::Intragroup, &input(scene, ctx, None, Focus::Group(&group.category)), |p| {
            let steps = steps_payload(p)?;
            check_steps(steps, allowed)?;
            Ok(steps.clone())
        })?;
    Ok((steps, Some(call)))
}

/// Full top-down pass: categorize, place groups, then order each group.
/// The returned plan's goal carries the groups and category edges.
pub fn plan_task(initial: &SceneGraph, ctx: &TaskContext<'_>, caller: &mut Caller<'_>) -> Result<Plan, PlannerError> {
    let cats = categorize(initial, ctx, caller)?;
    let scene = cats.apply_to(initial);
    let mut steps = Vec::new();
    let mut provenance = BTreeMap::new();
    let (inter, call) = plan_intergroup(&scene, ctx, caller)?;
    for s in inter {
        provenance.insert(steps.len(), Provenance::from_call(call));
        steps.push(s);
    }
    for group in &scene.groups {
        let (intra, call) = plan_intragroup(&scene, group, ctx, caller)?;
        for s in intra {
            if let Some(call) = call {
                provenance.insert(steps.len(), Provenance::from_call(call));
            }
            steps.push(s);
        }
    }
    Ok(Plan::new(&scene, steps, provenance))
}

/// Scene the plan was built against: the initial scene with the plan's groups.
pub fn planning_scene(initial: &SceneGraph, plan: &Plan) -> SceneGraph {
    let cats = Categorization {
        groups: plan.goal.groups.iter().map(|g| GroupDag { intra_edges: Vec::new(), ..g.clone() }).collect(),
        category_nodes: Vec::new(),
    };
    cats.apply_to(initial)
}

/// Regenerates a complete plan from the failed one, the outcome's events
/// (failing relations with their neighbors) and pending human feedback.
pub fn replan_with_feedback(
    initial: &SceneGraph,
    failed_plan: &Plan,
    outcome: &ExecutionOutcome,
    ctx: &TaskContext<'_>,
    caller: &mut Caller<'_>,
) -> Result<Plan, PlannerError> {
    if outcome.ok && ctx.feedback.is_empty() {
        return Err(PlannerError::NothingToRepair);
    }
    let scene = planning_scene(initial, failed_plan);
    let mut events = outcome.events.clone();
    events.extend(ctx.feedback.iter().cloned());
    let replan_ctx = TaskContext { feedback: &events, ..*ctx };
    let allowed = |id: &str| match placeholder_category(id) {
        Some(cat) => scene.group(cat).is_some(),
        None => scene.contains(id),
    };
    let (steps, call) =
        caller.call(Stage::Replan, &input(&scene, &replan_ctx, Some(&failed_plan.steps), Focus::None), |p| {
            let steps = steps_payload(p)?;
            check_steps(steps, allowed)?;
            Ok(steps.clone())
        })?;
    let provenance = (0..steps.len()).map(|i| (i, Provenance::from_call(call))).collect();
    Ok(Plan::new(&scene, steps, provenance))
}

/// Relations on the failing objects plus every relation incident to them,
/// as shown to the planner when replanning.
pub fn error_context(outcome: &ExecutionOutcome, scene: &SceneGraph) -> Vec<Relation> {
    let mut ids: BTreeSet<&str> = BTreeSet::new();
    let mut out: Vec<Relation> = Vec::new();
    for e in &outcome.events {
        if let Some(d) = e.physical() {
            ids.extend(d.object_ids.iter().map(String::as_str));
            for r in &d.relations {
                if !out.contains(r) {
                    out.push(r.clone());
                }
            }
        }
    }
    for r in &scene.edges {
        if ids.iter().any(|id| r.touches(id)) && !out.contains(r) {
            out.push(r.clone());
        }
    }
    out
}

/// Placeholder-free description of a step's group argument, for messages.
pub fn describe_arg(id: &str) -> String {
    match placeholder_category(id) {
        Some(cat) => format!("all {cat} objects"),
        None => id.to_string(),
    }
}

/// `group:<category>` for each group, in group order.
pub fn placeholders(groups: &[GroupDag]) -> Vec<String> {
    groups.iter().map(|g| group_placeholder(&g.category)).collect()
}
