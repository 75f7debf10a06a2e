//! Scene data model: objects, support/orientation relations and the
//! per-category group graphs produced by the planner.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::math::normalize_angle;

pub type NodeId = String;

/// State key every container carries; `false` means closed.
pub const OPEN: &str = "open";
pub const SLICED: &str = "sliced";

/// Prefix of the group-level placeholder ids used in plans (`group:<category>`).
pub const GROUP_PREFIX: &str = "group:";

pub fn group_placeholder(category: &str) -> String {
    let mut s = String::from(GROUP_PREFIX);
    s.push_str(category);
    s
}

pub fn placeholder_category(id: &str) -> Option<&str> {
    id.strip_prefix(GROUP_PREFIX)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    pub yaw: f64,
}

impl Pose {
    pub fn new(position: [f64; 3], yaw: f64) -> Self {
        Self { position, yaw: normalize_angle(yaw) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectNode {
    pub id: NodeId,
    #[serde(default)]
    pub category: String,
    pub label: String,
    pub half_extents: [f64; 3],
    pub mass: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Pose>,
    #[serde(default)]
    pub states: BTreeMap<String, bool>,
    #[serde(default)]
    pub is_container: bool,
    #[serde(default)]
    pub is_base: bool,
}

impl ObjectNode {
    /// Movable object with no category, pose or states.
    pub fn new(id: &str, label: &str, half_extents: [f64; 3], mass: f64) -> Self {
        Self {
            id: id.to_string(),
            category: String::new(),
            label: label.to_string(),
            half_extents,
            mass,
            pose: None,
            states: BTreeMap::new(),
            is_container: false,
            is_base: false,
        }
    }

    pub fn base(id: &str, label: &str, half_extents: [f64; 3], mass: f64) -> Self {
        Self { is_base: true, ..Self::new(id, label, half_extents, mass) }
    }

    pub fn container(id: &str, label: &str, half_extents: [f64; 3], mass: f64, open: bool) -> Self {
        let mut node = Self::new(id, label, half_extents, mass);
        node.is_container = true;
        node.states.insert(OPEN.to_string(), open);
        node
    }

    pub fn with_pose(mut self, pose: Pose) -> Self {
        self.pose = Some(pose);
        self
    }

    pub fn with_category(mut self, category: &str) -> Self {
        self.category = category.to_string();
        self
    }

    pub fn state(&self, name: &str) -> bool {
        self.states.get(name).copied().unwrap_or(false)
    }

    pub fn is_open(&self) -> bool {
        self.is_container && self.state(OPEN)
    }

    pub fn is_movable(&self) -> bool {
        !self.is_base
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    On,
    In,
    Near,
    LeftOf,
    RightOf,
    FrontOf,
    Behind,
}

impl RelationKind {
    pub const ALL: [RelationKind; 7] = [
        RelationKind::On,
        RelationKind::In,
        RelationKind::Near,
        RelationKind::LeftOf,
        RelationKind::RightOf,
        RelationKind::FrontOf,
        RelationKind::Behind,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::On => "on",
            RelationKind::In => "in",
            RelationKind::Near => "near",
            RelationKind::LeftOf => "left_of",
            RelationKind::RightOf => "right_of",
            RelationKind::FrontOf => "front_of",
            RelationKind::Behind => "behind",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.as_str() == s)
    }

    /// `on` and `in` are support relations; the rest carry no depth.
    pub fn is_support(self) -> bool {
        matches!(self, RelationKind::On | RelationKind::In)
    }

    pub fn is_orientation(self) -> bool {
        matches!(self, RelationKind::LeftOf | RelationKind::RightOf | RelationKind::FrontOf | RelationKind::Behind)
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationSource {
    Planner,
    HumanAdjustment,
    InitialObservation,
}

impl RelationSource {
    pub fn as_str(self) -> &'static str {
        match self {
            RelationSource::Planner => "planner",
            RelationSource::HumanAdjustment => "human_adjustment",
            RelationSource::InitialObservation => "initial_observation",
        }
    }
}

/// Directed relation `kind(parent, child)`: for `on` the child rests on the
/// parent, for orientation kinds the child sits on that side of the parent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub kind: RelationKind,
    pub parent: NodeId,
    pub child: NodeId,
    pub source: RelationSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_index: Option<usize>,
}

impl Relation {
    pub fn new(kind: RelationKind, parent: &str, child: &str, source: RelationSource) -> Self {
        Self { kind, parent: parent.to_string(), child: child.to_string(), source, step_index: None }
    }

    pub fn observed(kind: RelationKind, parent: &str, child: &str) -> Self {
        Self::new(kind, parent, child, RelationSource::InitialObservation)
    }

    pub fn key(&self) -> EdgeKey {
        EdgeKey { kind: self.kind, parent: self.parent.clone(), child: self.child.clone() }
    }

    pub fn touches(&self, id: &str) -> bool {
        self.parent == id || self.child == id
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}, {})", self.kind, self.parent, self.child)
    }
}

/// Provenance-free identity of an edge; edge sets compare on this.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeKey {
    pub kind: RelationKind,
    pub parent: NodeId,
    pub child: NodeId,
}

impl fmt::Display for EdgeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}, {})", self.kind, self.parent, self.child)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDag {
    pub category: String,
    pub member_ids: Vec<NodeId>,
    #[serde(default)]
    pub intra_edges: Vec<Relation>,
}

impl GroupDag {
    pub fn placeholder(&self) -> String {
        group_placeholder(&self.category)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SceneError {
    #[error("support relations contain a cycle through `{0}`")]
    CycleDetected(NodeId),
    #[error("node id sets differ between the two scenes")]
    NodeUniverseMismatch,
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
}

/// One entry of a scene edit script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "change", rename_all = "snake_case")]
pub enum RelationChange {
    Added { relation: Relation },
    Removed { relation: Relation },
    StateFlip { id: NodeId, state: String, value: bool },
    PoseChanged { id: NodeId, before: Option<Pose>, after: Option<Pose> },
}

impl RelationChange {
    pub fn reversed(&self) -> Self {
        match self {
            RelationChange::Added { relation } => RelationChange::Removed { relation: relation.clone() },
            RelationChange::Removed { relation } => RelationChange::Added { relation: relation.clone() },
            RelationChange::StateFlip { id, state, value } => {
                RelationChange::StateFlip { id: id.clone(), state: state.clone(), value: !value }
            }
            RelationChange::PoseChanged { id, before, after } => {
                RelationChange::PoseChanged { id: id.clone(), before: *after, after: *before }
            }
        }
    }

    pub fn affected_ids(&self) -> Vec<&str> {
        match self {
            RelationChange::Added { relation } | RelationChange::Removed { relation } => {
                alloc::vec![relation.parent.as_str(), relation.child.as_str()]
            }
            RelationChange::StateFlip { id, .. } | RelationChange::PoseChanged { id, .. } => {
                alloc::vec![id.as_str()]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "issue", rename_all = "snake_case")]
pub enum Violation {
    DanglingEdge { edge: String },
    SelfLoop { edge: String },
    NonContainerIn { edge: String },
    BaseAsChild { edge: String },
    MultipleSupports { id: NodeId },
    SupportCycle { id: NodeId },
    NonPositiveExtents { id: NodeId },
    NonPositiveMass { id: NodeId },
    OpenStateMismatch { id: NodeId },
    YawOutOfRange { id: NodeId },
    KeyMismatch { key: NodeId, id: NodeId },
    GroupUnknownMember { category: String, id: NodeId },
    GroupCategoryMismatch { category: String, id: NodeId },
    GroupDuplicateMember { id: NodeId },
    GroupCycle { category: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// A scene snapshot. `groups`/`category_edges` are empty until the planner
/// has categorized the objects; `category_edges` relate `group:<category>`
/// placeholders and form the category-level graph.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "SceneDoc", from = "SceneDoc")]
pub struct SceneGraph {
    pub nodes: BTreeMap<NodeId, ObjectNode>,
    pub edges: Vec<Relation>,
    pub groups: Vec<GroupDag>,
    pub category_edges: Vec<Relation>,
}

/// On-disk layout: nodes as an array of records.
#[derive(Serialize, Deserialize)]
struct SceneDoc {
    nodes: Vec<ObjectNode>,
    #[serde(default)]
    edges: Vec<Relation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    groups: Vec<GroupDag>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    category_edges: Vec<Relation>,
}

impl From<SceneGraph> for SceneDoc {
    fn from(g: SceneGraph) -> Self {
        SceneDoc {
            nodes: g.nodes.into_values().collect(),
            edges: g.edges,
            groups: g.groups,
            category_edges: g.category_edges,
        }
    }
}

impl From<SceneDoc> for SceneGraph {
    fn from(doc: SceneDoc) -> Self {
        SceneGraph {
            nodes: doc.nodes.into_iter().map(|n| (n.id.clone(), n)).collect(),
            edges: doc.edges,
            groups: doc.groups,
            category_edges: doc.category_edges,
        }
    }
}

impl SceneGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, node: ObjectNode) {
        self.nodes.insert(node.id.clone(), node);
    }

    pub fn with_node(mut self, node: ObjectNode) -> Self {
        self.add_node(node);
        self
    }

    pub fn with_edge(mut self, edge: Relation) -> Self {
        self.edges.push(edge);
        self
    }

    pub fn node(&self, id: &str) -> Option<&ObjectNode> {
        self.nodes.get(id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut ObjectNode> {
        self.nodes.get_mut(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn group(&self, category: &str) -> Option<&GroupDag> {
        self.groups.iter().find(|g| g.category == category)
    }

    /// The `on`/`in` edge holding `id`, if any.
    pub fn support_of(&self, id: &str) -> Option<&Relation> {
        self.edges.iter().find(|e| e.kind.is_support() && e.child == id)
    }

    pub fn supported_children<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Relation> + 'a {
        self.edges.iter().filter(move |e| e.kind.is_support() && e.parent == id)
    }

    /// Ancestors along support edges, nearest first. Stops on a cycle.
    pub fn support_chain(&self, id: &str) -> Vec<&Relation> {
        let mut chain = Vec::new();
        let mut seen = BTreeSet::new();
        let mut current = id;
        seen.insert(current);
        while let Some(rel) = self.support_of(current) {
            chain.push(rel);
            current = rel.parent.as_str();
            if !seen.insert(current) {
                break;
            }
        }
        chain
    }

    /// Root of the support tree holding `id` (itself when unsupported).
    pub fn support_root<'a>(&'a self, id: &'a str) -> &'a str {
        self.support_chain(id).last().map_or(id, |r| r.parent.as_str())
    }

    /// True when `ancestor` is reached from `id` by following support edges.
    pub fn is_supported_by(&self, id: &str, ancestor: &str) -> bool {
        self.support_chain(id).iter().any(|r| r.parent == ancestor)
    }

    /// True when `id` sits (possibly transitively) inside container `ancestor`.
    pub fn is_inside(&self, id: &str, ancestor: &str) -> bool {
        self.support_chain(id).iter().any(|r| r.kind == RelationKind::In && r.parent == ancestor)
    }

    /// Nodes in the support subtree below `root`, excluding `root`, in
    /// breadth-first order (parents before children).
    pub fn subtree(&self, root: &str) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = Vec::new();
        let mut frontier: Vec<NodeId> = alloc::vec![root.to_string()];
        let mut seen = BTreeSet::new();
        seen.insert(root.to_string());
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for parent in &frontier {
                for rel in self.supported_children(parent) {
                    if seen.insert(rel.child.clone()) {
                        out.push(rel.child.clone());
                        next.push(rel.child.clone());
                    }
                }
            }
            frontier = next;
        }
        out
    }

    /// Partition of the nodes by number of support hops from their root.
    pub fn depth_levels(&self) -> Result<BTreeMap<usize, Vec<NodeId>>, SceneError> {
        let mut depth: BTreeMap<&str, usize> = BTreeMap::new();
        for id in self.nodes.keys() {
            let mut path: Vec<&str> = alloc::vec![id.as_str()];
            let mut current = id.as_str();
            let base_depth = loop {
                if let Some(&d) = depth.get(current) {
                    path.pop();
                    break d + 1;
                }
                match self.support_of(current) {
                    Some(rel) if self.nodes.contains_key(&rel.parent) => {
                        let parent = rel.parent.as_str();
                        if path.contains(&parent) {
                            return Err(SceneError::CycleDetected(parent.to_string()));
                        }
                        path.push(parent);
                        current = parent;
                    }
                    _ => {
                        // `current` is a root
                        break 0;
                    }
                }
            };
            // path holds the unresolved chain from `id` down to the root/known node
            let n = path.len();
            for (i, node) in path.iter().enumerate() {
                depth.insert(node, base_depth + (n - 1 - i));
            }
        }
        let mut levels: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
        for (id, d) in depth {
            levels.entry(d).or_default().push(id.to_string());
        }
        Ok(levels)
    }

    pub fn edge_keys(&self) -> BTreeSet<EdgeKey> {
        self.edges.iter().map(Relation::key).collect()
    }

    pub fn category_edge_keys(&self) -> BTreeSet<EdgeKey> {
        self.category_edges.iter().map(Relation::key).collect()
    }

    pub fn has_edge(&self, key: &EdgeKey) -> bool {
        self.edges.iter().any(|e| e.kind == key.kind && e.parent == key.parent && e.child == key.child)
    }

    /// Edge-set and state equality, ignoring poses and provenance.
    pub fn same_relations_and_states(&self, other: &SceneGraph) -> bool {
        self.edge_keys() == other.edge_keys()
            && self.category_edge_keys() == other.category_edge_keys()
            && self.nodes.len() == other.nodes.len()
            && self.nodes.iter().all(|(id, n)| other.nodes.get(id).is_some_and(|o| states_equal(&n.states, &o.states)))
    }

    /// Relations and states that differ between the two snapshots.
    pub fn diff(&self, after: &SceneGraph) -> Result<Vec<RelationChange>, SceneError> {
        if !self.nodes.keys().eq(after.nodes.keys()) {
            return Err(SceneError::NodeUniverseMismatch);
        }
        let mut changes = Vec::new();
        let before_keys = self.edge_keys();
        let after_keys = after.edge_keys();
        for e in &self.edges {
            if !after_keys.contains(&e.key()) && !changes_contains_removed(&changes, e) {
                changes.push(RelationChange::Removed { relation: e.clone() });
            }
        }
        for e in &after.edges {
            if !before_keys.contains(&e.key()) && !changes_contains_added(&changes, e) {
                changes.push(RelationChange::Added { relation: e.clone() });
            }
        }
        for (id, node) in &self.nodes {
            let other = &after.nodes[id];
            let names: BTreeSet<&String> = node.states.keys().chain(other.states.keys()).collect();
            for name in names {
                let a = node.state(name);
                let b = other.state(name);
                if a != b {
                    changes.push(RelationChange::StateFlip { id: id.clone(), state: name.clone(), value: b });
                }
            }
        }
        Ok(changes)
    }

    /// `diff` plus one `PoseChanged` entry per node whose pose moved.
    pub fn diff_with_poses(&self, after: &SceneGraph) -> Result<Vec<RelationChange>, SceneError> {
        let mut changes = self.diff(after)?;
        for (id, node) in &self.nodes {
            let other = &after.nodes[id];
            if !poses_close(node.pose, other.pose) {
                changes.push(RelationChange::PoseChanged { id: id.clone(), before: node.pose, after: other.pose });
            }
        }
        Ok(changes)
    }

    /// Applies an edit script produced by `diff`.
    pub fn apply_changes(&mut self, changes: &[RelationChange]) -> Result<(), SceneError> {
        for change in changes {
            match change {
                RelationChange::Added { relation } => {
                    if !self.has_edge(&relation.key()) {
                        self.edges.push(relation.clone());
                    }
                }
                RelationChange::Removed { relation } => {
                    let key = relation.key();
                    self.edges.retain(|e| e.key() != key);
                }
                RelationChange::StateFlip { id, state, value } => {
                    let node = self.nodes.get_mut(id).ok_or_else(|| SceneError::UnknownNode(id.clone()))?;
                    node.states.insert(state.clone(), *value);
                }
                RelationChange::PoseChanged { id, after, .. } => {
                    let node = self.nodes.get_mut(id).ok_or_else(|| SceneError::UnknownNode(id.clone()))?;
                    node.pose = *after;
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        for (key, node) in &self.nodes {
            if *key != node.id {
                violations.push(Violation::KeyMismatch { key: key.clone(), id: node.id.clone() });
            }
            if !node.half_extents.iter().all(|&h| h > 0.0) {
                violations.push(Violation::NonPositiveExtents { id: node.id.clone() });
            }
            if node.mass.is_nan() || node.mass <= 0.0 {
                violations.push(Violation::NonPositiveMass { id: node.id.clone() });
            }
            if node.states.contains_key(OPEN) != node.is_container {
                violations.push(Violation::OpenStateMismatch { id: node.id.clone() });
            }
            if let Some(p) = node.pose {
                if !(0.0..core::f64::consts::TAU).contains(&p.yaw) {
                    violations.push(Violation::YawOutOfRange { id: node.id.clone() });
                }
            }
        }
        let mut support_count: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &self.edges {
            let label = e.to_string();
            if !self.contains(&e.parent) || !self.contains(&e.child) {
                violations.push(Violation::DanglingEdge { edge: label });
                continue;
            }
            if e.parent == e.child {
                violations.push(Violation::SelfLoop { edge: label });
                continue;
            }
            if e.kind == RelationKind::In && !self.nodes[&e.parent].is_container {
                violations.push(Violation::NonContainerIn { edge: label.clone() });
            }
            if e.kind.is_support() {
                if self.nodes[&e.child].is_base {
                    violations.push(Violation::BaseAsChild { edge: label });
                }
                *support_count.entry(e.child.as_str()).or_default() += 1;
            }
        }
        for (id, count) in support_count {
            if count > 1 {
                violations.push(Violation::MultipleSupports { id: id.to_string() });
            }
        }
        if let Err(SceneError::CycleDetected(id)) = self.depth_levels() {
            violations.push(Violation::SupportCycle { id });
        }
        let mut seen_members = BTreeSet::new();
        for group in &self.groups {
            for id in &group.member_ids {
                match self.nodes.get(id) {
                    None => violations
                        .push(Violation::GroupUnknownMember { category: group.category.clone(), id: id.clone() }),
                    Some(n) if !n.category.is_empty() && n.category != group.category => violations
                        .push(Violation::GroupCategoryMismatch { category: group.category.clone(), id: id.clone() }),
                    _ => {}
                }
                if !seen_members.insert(id.as_str()) {
                    violations.push(Violation::GroupDuplicateMember { id: id.clone() });
                }
            }
            if has_cycle(&group.intra_edges) {
                violations.push(Violation::GroupCycle { category: group.category.clone() });
            }
        }
        ValidationReport { violations }
    }
}

fn changes_contains_removed(changes: &[RelationChange], e: &Relation) -> bool {
    changes.iter().any(|c| matches!(c, RelationChange::Removed { relation } if relation.key() == e.key()))
}

fn changes_contains_added(changes: &[RelationChange], e: &Relation) -> bool {
    changes.iter().any(|c| matches!(c, RelationChange::Added { relation } if relation.key() == e.key()))
}

fn states_equal(a: &BTreeMap<String, bool>, b: &BTreeMap<String, bool>) -> bool {
    a.iter().all(|(k, v)| b.get(k).copied().unwrap_or(false) == *v)
        && b.iter().all(|(k, v)| a.get(k).copied().unwrap_or(false) == *v)
}

fn poses_close(a: Option<Pose>, b: Option<Pose>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(a), Some(b)) => {
            a.position.iter().zip(b.position.iter()).all(|(x, y)| libm::fabs(x - y) <= 1e-9)
                && libm::fabs(crate::math::angle_diff(a.yaw, b.yaw)) <= 1e-9
        }
        _ => false,
    }
}

/// Cycle test over directed edges parent -> child.
pub fn has_cycle(edges: &[Relation]) -> bool {
    let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in edges {
        adj.entry(e.parent.as_str()).or_default().push(e.child.as_str());
    }
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut mark: BTreeMap<&str, u8> = BTreeMap::new();
    for &start in adj.keys() {
        if mark.get(start).copied().unwrap_or(0) != 0 {
            continue;
        }
        let mut stack: Vec<(&str, usize)> = alloc::vec![(start, 0)];
        mark.insert(start, 1);
        while let Some((node, idx)) = stack.pop() {
            let next = adj.get(node).and_then(|v| v.get(idx)).copied();
            match next {
                Some(child) => {
                    stack.push((node, idx + 1));
                    match mark.get(child).copied().unwrap_or(0) {
                        1 => return true,
                        0 => {
                            mark.insert(child, 1);
                            stack.push((child, 0));
                        }
                        _ => {}
                    }
                }
                None => {
                    mark.insert(node, 2);
                }
            }
        }
    }
    false
}
