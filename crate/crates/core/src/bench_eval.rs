//! Benchmark scenarios, preference predicates and the metric suite.
//!
//! Scenario sizes follow the four activity types' average attributes; the
//! counts are sampler means, drawn uniformly within ±3 of the mean.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::TAU;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::llm_backend::PlannerBackend;
use crate::math::derive_seed;
use crate::planner::{ExecutionOutcome, Plan, Primitive};
use crate::pose_synthesis::PoseSolution;
use crate::preference::{similarity, Embedder, PreferenceError};
use crate::scene_graph::{GroupDag, NodeId, ObjectNode, Pose, Relation, RelationKind, RelationSource, SceneGraph};
use crate::session::{LoopConfig, LoopError, Session, SessionStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityType {
    Tidy,
    Clean,
    PackUnpack,
    LoadUnload,
}

/// Average attributes of an activity type across its scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityRow {
    pub objects: usize,
    pub states: usize,
    pub actions: usize,
    pub amount: usize,
}

impl ActivityType {
    pub const ALL: [ActivityType; 4] =
        [ActivityType::Tidy, ActivityType::Clean, ActivityType::PackUnpack, ActivityType::LoadUnload];

    pub fn as_str(self) -> &'static str {
        match self {
            ActivityType::Tidy => "tidy",
            ActivityType::Clean => "clean",
            ActivityType::PackUnpack => "pack_unpack",
            ActivityType::LoadUnload => "load_unload",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }

    pub fn row(self) -> ActivityRow {
        let (objects, states, actions, amount) = match self {
            ActivityType::Tidy => (14, 10, 10, 150),
            ActivityType::Clean => (21, 16, 12, 100),
            ActivityType::PackUnpack => (19, 11, 11, 80),
            ActivityType::LoadUnload => (17, 12, 11, 80),
        };
        ActivityRow { objects, states, actions, amount }
    }

    pub fn default_preference(self) -> &'static str {
        match self {
            ActivityType::Tidy => "I prefer everything to be laid flat on the table rather than stacked together",
            ActivityType::Clean => "I prefer identical objects not to be stacked on top of each other",
            ActivityType::PackUnpack => "I prefer that nothing unrelated to sleeping is placed on the bed",
            ActivityType::LoadUnload => "I prefer all items to be placed in the same cart",
        }
    }

    /// Predicate tag checking the default preference.
    pub fn preference_tag(self) -> &'static str {
        match self {
            ActivityType::Tidy => "no_stacking",
            ActivityType::Clean => "no_identical_stacking",
            ActivityType::PackUnpack => "bed_sleep_only",
            ActivityType::LoadUnload => "same_container",
        }
    }

    pub fn instruction(self) -> &'static str {
        match self {
            ActivityType::Tidy => "Tidy up the table.",
            ActivityType::Clean => {
                "Clean up: put the dishes in the sink and keep the cleaning supplies on the counter."
            }
            ActivityType::PackUnpack => "Unpack everything onto the bed and the dresser.",
            ActivityType::LoadUnload => "Unload the groceries from the trunk into the carts.",
        }
    }

    pub fn action_vocabulary(self) -> Vec<Primitive> {
        use Primitive::*;
        match self {
            ActivityType::Tidy => alloc::vec![Group, PutOn, PutIn, PutNear, Open, Close],
            ActivityType::Clean => alloc::vec![Group, PutOn, PutIn, PutNear, Open, Close, Slice],
            ActivityType::PackUnpack => alloc::vec![Group, PutOn, PutIn, PutNear, Open, Close],
            ActivityType::LoadUnload => alloc::vec![PutOn, PutIn, PutNear, Open, Close],
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BenchError {
    #[error("invalid scenario spec: {0}")]
    InvalidSpec(String),
    #[error("unknown preference tag `{0}`")]
    UnknownPreferenceTag(String),
    #[error("normalization needs a nonempty batch")]
    EmptyBatch,
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Loop(#[from] LoopError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub activity_type: ActivityType,
    /// Inclusive object count range.
    pub object_count_range: [usize; 2],
    pub state_count: usize,
    pub action_vocabulary: Vec<Primitive>,
    pub default_preference: String,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(activity: ActivityType, seed: u64) -> Self {
        let row = activity.row();
        Self {
            activity_type: activity,
            object_count_range: [row.objects.saturating_sub(3).max(1), row.objects + 3],
            state_count: row.states,
            action_vocabulary: activity.action_vocabulary(),
            default_preference: activity.default_preference().to_string(),
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let [lo, hi] = self.object_count_range;
        if lo == 0 || lo > hi {
            return Err(BenchError::InvalidSpec(format!("object count range [{lo}, {hi}]")));
        }
        if self.state_count == 0 {
            return Err(BenchError::InvalidSpec("state count must be positive".into()));
        }
        let want: BTreeSet<Primitive> = self.activity_type.action_vocabulary().into_iter().collect();
        let got: BTreeSet<Primitive> = self.action_vocabulary.iter().copied().collect();
        if want != got {
            return Err(BenchError::InvalidSpec(format!(
                "action vocabulary does not match activity `{}`",
                self.activity_type.as_str()
            )));
        }
        if self.default_preference.trim().is_empty() {
            return Err(BenchError::InvalidSpec("default preference is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub text: String,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scene: SceneGraph,
    pub instruction: String,
    pub ground_truth: GroundTruth,
}

// ---- catalogs ---------------------------------------------------------------

/// Catalog entry: label, half extents (m), mass (kg), stackable.
type Item = (&'static str, [f64; 3], f64, bool);

const TABLEWARE: &[Item] = &[
    ("plate", [0.12, 0.12, 0.01], 0.4, true),
    ("bowl", [0.08, 0.08, 0.04], 0.3, true),
    ("mug", [0.045, 0.045, 0.05], 0.3, false),
    ("cup", [0.04, 0.04, 0.045], 0.2, false),
    ("glass", [0.035, 0.035, 0.06], 0.2, false),
    ("fork", [0.015, 0.09, 0.008], 0.05, false),
    ("knife", [0.012, 0.11, 0.008], 0.06, false),
    ("spoon", [0.018, 0.08, 0.008], 0.05, false),
];

const READING: &[Item] = &[
    ("book", [0.1, 0.14, 0.02], 0.6, true),
    ("notebook", [0.1, 0.14, 0.008], 0.25, true),
    ("magazine", [0.1, 0.14, 0.004], 0.15, true),
];

const FOOD: &[Item] = &[
    ("apple", [0.04, 0.04, 0.04], 0.2, false),
    ("banana", [0.1, 0.03, 0.02], 0.15, false),
    ("sandwich", [0.06, 0.06, 0.025], 0.25, false),
];

const STATIONERY: &[Item] = &[
    ("pen", [0.006, 0.07, 0.006], 0.02, false),
    ("pencil", [0.005, 0.09, 0.005], 0.01, false),
    ("stapler", [0.025, 0.08, 0.03], 0.3, false),
    ("scissors", [0.04, 0.09, 0.006], 0.08, false),
];

const ELECTRONICS: &[Item] = &[
    ("phone", [0.037, 0.075, 0.005], 0.18, false),
    ("laptop", [0.16, 0.11, 0.01], 1.4, true),
    ("charger", [0.03, 0.03, 0.015], 0.1, false),
    ("headphones", [0.08, 0.09, 0.04], 0.25, false),
];

const CONDIMENTS: &[Item] = &[("salt", [0.02, 0.02, 0.05], 0.1, false), ("pepper", [0.02, 0.02, 0.05], 0.1, false)];

const DECOR: &[Item] = &[("vase", [0.05, 0.05, 0.12], 0.6, false), ("candle", [0.03, 0.03, 0.05], 0.2, false)];

const CLEANING: &[Item] = &[
    ("sponge", [0.05, 0.035, 0.02], 0.03, false),
    ("towel", [0.15, 0.1, 0.01], 0.1, true),
    ("spray", [0.04, 0.04, 0.12], 0.5, false),
    ("cloth", [0.12, 0.12, 0.005], 0.05, true),
];

const CLOTHES: &[Item] = &[
    ("shirt", [0.15, 0.2, 0.02], 0.25, true),
    ("pants", [0.18, 0.25, 0.025], 0.4, true),
    ("sock", [0.04, 0.1, 0.01], 0.05, false),
    ("sweater", [0.18, 0.22, 0.04], 0.5, true),
];

const BEDDING: &[Item] = &[("pillow", [0.3, 0.2, 0.06], 0.6, true), ("blanket", [0.3, 0.25, 0.05], 1.2, true)];

const TOILETRIES: &[Item] = &[
    ("toothbrush", [0.01, 0.09, 0.01], 0.02, false),
    ("toothpaste", [0.025, 0.09, 0.02], 0.1, false),
    ("soap", [0.04, 0.03, 0.02], 0.1, false),
    ("shampoo", [0.035, 0.035, 0.09], 0.35, false),
];

const GROCERIES: &[Item] = &[
    ("milk", [0.045, 0.045, 0.12], 1.0, false),
    ("cereal", [0.1, 0.035, 0.15], 0.5, true),
    ("can", [0.035, 0.035, 0.06], 0.4, false),
    ("bottle", [0.04, 0.04, 0.14], 0.8, false),
    ("egg_carton", [0.15, 0.06, 0.035], 0.7, true),
    ("bag", [0.12, 0.08, 0.1], 0.5, false),
];

/// The dining-table catalog: 7 categories, 26 objects.
pub const TABLETOP_CATEGORIES: &[(&str, &[Item])] = &[
    ("tableware", TABLEWARE),
    ("reading", READING),
    ("food", FOOD),
    ("stationery", STATIONERY),
    ("electronics", ELECTRONICS),
    ("condiments", CONDIMENTS),
    ("decor", DECOR),
];

fn tabletop_items() -> Vec<Item> {
    TABLETOP_CATEGORIES.iter().flat_map(|(_, items)| items.iter().copied()).collect()
}

fn table() -> ObjectNode {
    ObjectNode::base("table", "table", [0.9, 0.6, 0.02], 25.0).with_pose(Pose::new([0.0, 0.0, 0.74], 0.0))
}

/// Adds `count` objects drawn from `pool`, ids `<label>_<n>`.
fn add_objects(g: &mut SceneGraph, rng: &mut ChaCha8Rng, pool: &[Item], count: usize) -> Vec<NodeId> {
    let mut counters: BTreeMap<&str, usize> = BTreeMap::new();
    let mut ids = Vec::new();
    for _ in 0..count {
        let (label, half, mass, _) = *pool.choose(rng).expect("nonempty pool");
        let n = counters.entry(label).or_insert(0);
        *n += 1;
        let mut id = format!("{label}_{n}");
        while g.contains(&id) {
            *n += 1;
            id = format!("{label}_{n}");
        }
        g.add_node(ObjectNode::new(&id, label, half, mass));
        ids.push(id);
    }
    ids
}

fn stackable(pool: &[Item], label: &str) -> bool {
    pool.iter().any(|(l, _, _, s)| *l == label && *s)
}

/// Puts each object on `base`, or with probability `p_stack` on top of an
/// earlier stackable object that has nothing on it yet.
fn scatter_with_stacks(
    g: &mut SceneGraph,
    rng: &mut ChaCha8Rng,
    pool: &[Item],
    ids: &[NodeId],
    base: &str,
    p_stack: f64,
) {
    let mut tops: Vec<NodeId> = Vec::new();
    for id in ids {
        let label = g.nodes[id].label.clone();
        let parent = if stackable(pool, &label) && !tops.is_empty() && rng.random_bool(p_stack) {
            let k = rng.random_range(0..tops.len());
            tops.remove(k)
        } else {
            base.to_string()
        };
        g.edges.push(Relation::observed(RelationKind::On, &parent, id));
        if stackable(pool, &label) {
            tops.push(id.clone());
        }
    }
}

/// Deterministic per seed; the result always validates.
pub fn sample_scenario(spec: &ScenarioSpec) -> Result<Scenario, BenchError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [lo, hi] = spec.object_count_range;
    let n = rng.random_range(lo..=hi);
    let mut g = SceneGraph::new();
    match spec.activity_type {
        ActivityType::Tidy => {
            g.add_node(table());
            let pool = tabletop_items();
            let ids = add_objects(&mut g, &mut rng, &pool, n);
            scatter_with_stacks(&mut g, &mut rng, &pool, &ids, "table", 0.35);
        }
        ActivityType::Clean => {
            g.add_node(
                ObjectNode::base("counter", "counter", [1.0, 0.45, 0.02], 40.0)
                    .with_pose(Pose::new([0.0, 0.0, 0.9], 0.0)),
            );
            let mut sink =
                ObjectNode::base("sink", "sink", [0.4, 0.3, 0.15], 15.0).with_pose(Pose::new([1.6, 0.0, 0.8], 0.0));
            sink.is_container = true;
            sink.states.insert(crate::scene_graph::OPEN.into(), true);
            g.add_node(sink);
            let pool: Vec<Item> = TABLEWARE.iter().chain(CLEANING).copied().collect();
            let ids = add_objects(&mut g, &mut rng, &pool, n);
            scatter_with_stacks(&mut g, &mut rng, &pool, &ids, "counter", 0.4);
        }
        ActivityType::PackUnpack => {
            g.add_node(
                ObjectNode::base("bed", "bed", [1.0, 0.8, 0.25], 60.0).with_pose(Pose::new([0.0, 0.0, 0.25], 0.0)),
            );
            g.add_node(
                ObjectNode::base("dresser", "dresser", [0.8, 0.45, 0.4], 50.0)
                    .with_pose(Pose::new([2.2, 0.0, 0.4], 0.0)),
            );
            let mut suitcase = ObjectNode::base("suitcase", "suitcase", [0.4, 0.3, 0.15], 4.0)
                .with_pose(Pose::new([0.0, 1.6, 0.15], 0.0));
            suitcase.is_container = true;
            suitcase.states.insert(crate::scene_graph::OPEN.into(), false);
            g.add_node(suitcase);
            let pool: Vec<Item> = CLOTHES.iter().chain(BEDDING).chain(TOILETRIES).chain(ELECTRONICS).copied().collect();
            let ids = add_objects(&mut g, &mut rng, &pool, n);
            for id in &ids {
                let bedding = BEDDING.iter().any(|(l, ..)| *l == g.nodes[id].label);
                let edge = if bedding || rng.random_bool(0.25) {
                    Relation::observed(RelationKind::On, "bed", id)
                } else {
                    Relation::observed(RelationKind::In, "suitcase", id)
                };
                g.edges.push(edge);
            }
        }
        ActivityType::LoadUnload => {
            let mut trunk =
                ObjectNode::base("trunk", "trunk", [0.6, 0.5, 0.25], 80.0).with_pose(Pose::new([0.0, 0.0, 0.5], 0.0));
            trunk.is_container = true;
            trunk.states.insert(crate::scene_graph::OPEN.into(), true);
            g.add_node(trunk);
            for (k, x) in [(1, 1.6), (2, 2.8)] {
                let id = format!("cart_{k}");
                let mut cart =
                    ObjectNode::base(&id, "cart", [0.5, 0.35, 0.3], 12.0).with_pose(Pose::new([x, 0.0, 0.6], 0.0));
                cart.is_container = true;
                cart.states.insert(crate::scene_graph::OPEN.into(), true);
                g.add_node(cart);
            }
            let pool: Vec<Item> = GROCERIES.iter().chain(FOOD).chain(CLEANING).copied().collect();
            let ids = add_objects(&mut g, &mut rng, &pool, n);
            for id in &ids {
                g.edges.push(Relation::observed(RelationKind::In, "trunk", id));
            }
        }
    }
    let a = spec.activity_type;
    Ok(Scenario {
        scene: g,
        instruction: a.instruction().to_string(),
        ground_truth: GroundTruth { text: spec.default_preference.clone(), tag: a.preference_tag().to_string() },
    })
}

/// Mixing rule: mix when either category holds less than a third or more
/// than two thirds of the objects.
pub fn mix_or_separate(boxes: usize, cylinders: usize) -> &'static str {
    let n = boxes + cylinders;
    if 3 * boxes < n || 3 * boxes > 2 * n {
        "mix"
    } else {
        "separate"
    }
}

pub const MIX_PREFERENCE: &str =
    "I prefer boxes and cylinders to be mixed together, with some stacked on the other kind.";
pub const SEPARATE_PREFERENCE: &str =
    "I prefer boxes and cylinders to be kept separate, never stacked on the other kind.";

/// Boxes and cylinders without semantic labels, 5 to 10 objects by default.
pub fn sample_nonsemantic(seed: u64, count_range: [usize; 2]) -> Result<Scenario, BenchError> {
    let [lo, hi] = count_range;
    if lo < 2 || lo > hi {
        return Err(BenchError::InvalidSpec(format!("object count range [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(lo..=hi);
    let boxes = rng.random_range(1..n);
    let mut g = SceneGraph::new().with_node(table());
    for i in 0..n {
        let (id, node) = if i < boxes {
            let id = format!("box_{}", i + 1);
            let half = [rng.random_range(0.04..0.08), rng.random_range(0.04..0.08), rng.random_range(0.03..0.06)];
            (id.clone(), ObjectNode::new(&id, "box", half, rng.random_range(0.1..0.5)))
        } else {
            let id = format!("cylinder_{}", i - boxes + 1);
            let r = rng.random_range(0.03..0.06);
            (
                id.clone(),
                ObjectNode::new(&id, "cylinder", [r, r, rng.random_range(0.03..0.07)], rng.random_range(0.1..0.5)),
            )
        };
        g.add_node(node);
        g.edges.push(Relation::observed(RelationKind::On, "table", &id));
    }
    let tag = mix_or_separate(boxes, n - boxes);
    let text = if tag == "mix" { MIX_PREFERENCE } else { SEPARATE_PREFERENCE };
    Ok(Scenario {
        scene: g,
        instruction: "Arrange the boxes and cylinders on the table.".into(),
        ground_truth: GroundTruth { text: text.into(), tag: tag.into() },
    })
}

/// 3 to 5 distinct catalog objects on the dining table, grouped by category.
pub fn sample_tabletop(seed: u64) -> SceneGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=5);
    let items: Vec<(&str, Item)> =
        TABLETOP_CATEGORIES.iter().flat_map(|(cat, items)| items.iter().map(move |i| (*cat, *i))).collect();
    let mut g = SceneGraph::new().with_node(table());
    let mut groups: BTreeMap<&str, Vec<NodeId>> = BTreeMap::new();
    for (cat, (label, half, mass, _)) in items.choose_multiple(&mut rng, n) {
        g.add_node(ObjectNode::new(label, label, *half, *mass).with_category(cat));
        g.edges.push(Relation::observed(RelationKind::On, "table", label));
        groups.entry(cat).or_default().push(label.to_string());
    }
    g.groups = groups
        .into_iter()
        .map(|(cat, member_ids)| GroupDag { category: cat.to_string(), member_ids, intra_edges: Vec::new() })
        .collect();
    g
}

/// Uniform-random poses for the objects directly on `base`: centers inside
/// the surface, yaw uniform in [0, 2π). Ignores collisions.
pub fn random_layout(g: &SceneGraph, base: &str, seed: u64) -> BTreeMap<NodeId, Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    let Some(b) = g.node(base) else { return out };
    let bp = b.pose.unwrap_or(Pose::new([0.0; 3], 0.0));
    let [hx, hy, hz] = b.half_extents;
    for r in g.supported_children(base) {
        let n = &g.nodes[&r.child];
        let x = bp.position[0] + rng.random_range(-hx..hx);
        let y = bp.position[1] + rng.random_range(-hy..hy);
        let z = bp.position[2] + hz + n.half_extents[2];
        out.insert(n.id.clone(), Pose::new([x, y, z], rng.random_range(0.0..TAU)));
    }
    out
}

// ---- preference predicates -------------------------------------------------------

pub const PREDICATE_TAGS: [&str; 6] =
    ["no_stacking", "no_identical_stacking", "same_container", "mix", "separate", "bed_sleep_only"];

const SLEEP_LABELS: &[&str] = &["pillow", "blanket"];

fn movable(g: &SceneGraph, id: &str) -> bool {
    g.node(id).is_some_and(ObjectNode::is_movable)
}

/// `on` edges between two movable objects.
fn stacks(g: &SceneGraph) -> impl Iterator<Item = &Relation> {
    g.edges.iter().filter(|e| e.kind == RelationKind::On && movable(g, &e.parent) && movable(g, &e.child))
}

fn label<'a>(g: &'a SceneGraph, id: &str) -> &'a str {
    g.node(id).map_or("", |n| n.label.as_str())
}

/// Machine check of a preference tag on a goal graph. Mixing and separation
/// are judged on labels, since planning may have rewritten categories.
pub fn preference_predicate(tag: &str, goal: &SceneGraph) -> Result<bool, BenchError> {
    let movables = || goal.nodes.values().filter(|n| n.is_movable());
    Ok(match tag {
        "no_stacking" => stacks(goal).next().is_none(),
        "no_identical_stacking" => stacks(goal).all(|e| label(goal, &e.parent) != label(goal, &e.child)),
        "same_container" => {
            let containers: Vec<&ObjectNode> = goal.nodes.values().filter(|n| n.is_base && n.is_container).collect();
            containers.iter().any(|c| movables().all(|m| goal.is_inside(&m.id, &c.id)))
        }
        "mix" => stacks(goal).any(|e| label(goal, &e.parent) != label(goal, &e.child)),
        "separate" => stacks(goal).all(|e| label(goal, &e.parent) == label(goal, &e.child)),
        "bed_sleep_only" => movables().all(|m| {
            let on_bed = goal.support_chain(&m.id).iter().any(|r| label(goal, &r.parent) == "bed");
            !on_bed || SLEEP_LABELS.contains(&m.label.as_str())
        }),
        other => return Err(BenchError::UnknownPreferenceTag(other.to_string())),
    })
}

/// Moves `child` onto (or into) `parent`, replacing its support.
fn resupport(g: &mut SceneGraph, child: &str, parent: &str) {
    g.edges.retain(|e| !(e.kind.is_support() && e.child == child));
    let kind = if g.nodes[parent].is_container { RelationKind::In } else { RelationKind::On };
    g.edges.push(Relation::new(kind, parent, child, RelationSource::HumanAdjustment));
}

/// What a person holding the preference would change in `scene`; `None`
/// when the scene already satisfies it or nothing sensible can be done.
pub fn simulate_adjustment(tag: &str, scene: &SceneGraph) -> Result<Option<SceneGraph>, BenchError> {
    if preference_predicate(tag, scene)? {
        return Ok(None);
    }
    let mut g = scene.clone();
    match tag {
        "no_stacking" | "no_identical_stacking" | "separate" => {
            let offending: Vec<(String, String)> = stacks(scene)
                .filter(|e| match tag {
                    "no_stacking" => true,
                    "no_identical_stacking" => label(scene, &e.parent) == label(scene, &e.child),
                    _ => label(scene, &e.parent) != label(scene, &e.child),
                })
                .map(|e| (e.child.clone(), scene.support_root(&e.child).to_string()))
                .collect();
            for (child, root) in offending {
                resupport(&mut g, &child, &root);
            }
        }
        "same_container" => {
            let Some(c) = g.nodes.values().find(|n| n.is_base && n.is_container).map(|n| n.id.clone()) else {
                return Ok(None);
            };
            let roots: Vec<String> = g
                .nodes
                .values()
                .filter(|n| n.is_movable() && !scene.is_inside(&n.id, &c))
                .filter(|n| scene.support_of(&n.id).is_none_or(|r| !movable(scene, &r.parent)))
                .map(|n| n.id.clone())
                .collect();
            for id in roots {
                resupport(&mut g, &id, &c);
            }
        }
        "bed_sleep_only" => {
            let Some(alt) =
                g.nodes.values().find(|n| n.is_base && n.label != "bed" && !n.is_container).map(|n| n.id.clone())
            else {
                return Ok(None);
            };
            let offending: Vec<String> = scene
                .edges
                .iter()
                .filter(|e| e.kind.is_support() && label(scene, &e.parent) == "bed")
                .filter(|e| !SLEEP_LABELS.contains(&label(scene, &e.child)))
                .map(|e| e.child.clone())
                .collect();
            for id in offending {
                resupport(&mut g, &id, &alt);
            }
        }
        "mix" => {
            let tops: Vec<&ObjectNode> = scene
                .nodes
                .values()
                .filter(|n| n.is_movable() && scene.supported_children(&n.id).next().is_none())
                .collect();
            let pair =
                tops.iter().find_map(|a| tops.iter().find(|b| b.label != a.label && b.id != a.id).map(|b| (*a, *b)));
            let Some((parent, child)) = pair else { return Ok(None) };
            resupport(&mut g, &child.id, &parent.id);
        }
        other => return Err(BenchError::UnknownPreferenceTag(other.to_string())),
    }
    Ok(Some(g))
}

// ---- metrics -----------------------------------------------------------------------

pub const METRICS: [&str; 6] = ["stability", "area", "length", "feasibility", "pref_learn", "pref_apply"];

/// Lower raw values are better for these; the rest are higher-is-better.
pub const LOWER_IS_BETTER: [&str; 3] = ["stability", "area", "length"];

/// Min-max scaling to [0, 10]; a constant batch maps to 5.
pub fn min_max_normalize(values: &[f64]) -> Result<Vec<f64>, BenchError> {
    if values.is_empty() {
        return Err(BenchError::EmptyBatch);
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Ok(alloc::vec![5.0; values.len()]);
    }
    Ok(values.iter().map(|v| 10.0 * ((v - lo) / (hi - lo))).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub raw: BTreeMap<String, f64>,
    pub normalized: BTreeMap<String, f64>,
    /// Per-metric `[min, max]` of the batch the normalization used.
    pub batch_range: BTreeMap<String, [f64; 2]>,
    /// Externally collected participant score, merged in by hand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subjective: Option<f64>,
}

/// Inputs of one scored run.
pub struct RunInputs<'a> {
    pub initial: &'a SceneGraph,
    pub plan: &'a Plan,
    pub outcome: &'a ExecutionOutcome,
    pub solution: Option<&'a PoseSolution>,
    pub learned_preference: Option<&'a str>,
    pub ground_truth_preference: &'a str,
    /// Predicate results on held-out scenarios planned with the learned preference.
    pub applied: &'a [bool],
}

/// Raw metrics of one run. Metrics that do not apply (no poses, nothing
/// learned, no held-out runs) are left out.
pub fn raw_metrics(run: &RunInputs<'_>, embedder: &dyn Embedder) -> Result<BTreeMap<String, f64>, BenchError> {
    let _ = run.initial;
    let mut raw = BTreeMap::new();
    if let Some(sol) = run.solution {
        raw.insert("stability".into(), sol.breakdown.stability_cost);
        raw.insert("area".into(), sol.breakdown.area);
    }
    raw.insert("length".into(), run.plan.steps.len() as f64);
    let feasible = run.outcome.ok && run.solution.is_some_and(|s| s.feasible);
    raw.insert("feasibility".into(), if feasible { 1.0 } else { 0.0 });
    if let Some(learned) = run.learned_preference {
        raw.insert("pref_learn".into(), similarity(learned, run.ground_truth_preference, embedder)?);
    }
    if !run.applied.is_empty() {
        let hits = run.applied.iter().filter(|b| **b).count();
        raw.insert("pref_apply".into(), hits as f64 / run.applied.len() as f64);
    }
    Ok(raw)
}

/// Normalizes every metric over the runs that report it.
pub fn score(batch: &[BTreeMap<String, f64>]) -> Result<Vec<MetricReport>, BenchError> {
    if batch.is_empty() {
        return Err(BenchError::EmptyBatch);
    }
    let mut reports: Vec<MetricReport> = batch
        .iter()
        .map(|raw| MetricReport {
            raw: raw.clone(),
            normalized: BTreeMap::new(),
            batch_range: BTreeMap::new(),
            subjective: None,
        })
        .collect();
    for metric in METRICS {
        let idx: Vec<usize> = (0..batch.len()).filter(|i| batch[*i].contains_key(metric)).collect();
        if idx.is_empty() {
            continue;
        }
        let values: Vec<f64> = idx.iter().map(|i| batch[*i][metric]).collect();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (i, v) in idx.iter().zip(min_max_normalize(&values)?) {
            reports[*i].normalized.insert(metric.into(), v);
            reports[*i].batch_range.insert(metric.into(), [lo, hi]);
        }
    }
    Ok(reports)
}

/// Status and iteration count are taken before the simulated adjustment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub status: SessionStatus,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learned_preference: Option<String>,
    pub predicate_before: bool,
    pub predicate_after_learning: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub activity: String,
    pub ground_truth_tag: String,
    pub runs: Vec<RunSummary>,
    pub reports: Vec<MetricReport>,
    /// Runs whose plan executed and whose poses were feasible.
    pub feasible_runs: usize,
    pub raw_means: BTreeMap<String, f64>,
    pub normalized_means: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Held-out scenarios per seed used to measure preference application.
    pub held_out: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { held_out: 2 }
    }
}

fn goal_of(s: &Session) -> Option<&SceneGraph> {
    s.plan.as_ref().map(|p| &p.goal)
}

fn run_to_end(s: &mut Session, backend: &dyn PlannerBackend) -> Result<(), BenchError> {
    match s.run_loop(backend) {
        Ok(()) | Err(LoopError::LoopBudgetExhausted { .. }) | Err(LoopError::NoProgress { .. }) => Ok(()),
        Err(e) => Err(e.into()),
    }
}

type SeedRun = (BTreeMap<String, f64>, RunSummary);

/// Sampler used by [`run_benchmark`]: seed to scenario.
pub type Sampler<'a> = dyn Fn(u64) -> Result<Scenario, BenchError> + Send + Sync + 'a;

fn run_seed(
    sampler: &Sampler<'_>,
    seed: u64,
    backend: &dyn PlannerBackend,
    loop_cfg: &LoopConfig,
    bench: &BenchConfig,
    embedder: &dyn Embedder,
) -> Result<Option<SeedRun>, BenchError> {
    let sc = sampler(seed)?;
    let tag = &sc.ground_truth.tag;
    let cfg = LoopConfig { synthesis: loop_cfg.synthesis.with_seed(seed), ..*loop_cfg };
    let mut s = Session::new(&format!("bench-{seed}"), sc.scene.clone(), &sc.instruction, cfg);
    run_to_end(&mut s, backend)?;
    let (Some(plan), Some(outcome)) = (s.plan.clone(), s.outcome.clone()) else {
        return Ok(None);
    };
    let solution = s.solution.clone();
    let predicate_before = preference_predicate(tag, &plan.goal)?;
    let (status, iterations) = (s.status, s.total_iterations);

    let mut learned = None;
    if let Some(adjusted) = simulate_adjustment(tag, &s.current_scene())? {
        match s.add_adjustment(adjusted, backend) {
            Ok(record) => learned = Some(record.text),
            Err(LoopError::EmptyDiff) => {}
            Err(e) => return Err(e.into()),
        }
    }
    let mut applied = Vec::new();
    if learned.is_some() {
        for j in 0..bench.held_out {
            let held = sampler(derive_seed(seed, j as u64 + 1))?;
            let mut h = Session::new(&format!("bench-{seed}-{j}"), held.scene, &held.instruction, cfg)
                .with_store(s.store.clone());
            run_to_end(&mut h, backend)?;
            applied.push(match goal_of(&h) {
                Some(goal) => preference_predicate(tag, goal)?,
                None => false,
            });
        }
    }
    let run = RunInputs {
        initial: &sc.scene,
        plan: &plan,
        outcome: &outcome,
        solution: solution.as_ref(),
        learned_preference: learned.as_deref(),
        ground_truth_preference: &sc.ground_truth.text,
        applied: &applied,
    };
    let raw = raw_metrics(&run, embedder)?;
    let summary = RunSummary {
        seed,
        status,
        iterations,
        learned_preference: learned,
        predicate_before,
        predicate_after_learning: applied,
    };
    Ok(Some((raw, summary)))
}

#[cfg(not(feature = "parallel"))]
fn run_seeds(
    sampler: &Sampler<'_>,
    seeds: &[u64],
    backend: &dyn PlannerBackend,
    loop_cfg: &LoopConfig,
    bench: &BenchConfig,
    embedder: &dyn Embedder,
) -> Result<Vec<Option<SeedRun>>, BenchError> {
    seeds.iter().map(|s| run_seed(sampler, *s, backend, loop_cfg, bench, embedder)).collect()
}

#[cfg(feature = "parallel")]
fn run_seeds(
    sampler: &Sampler<'_>,
    seeds: &[u64],
    backend: &dyn PlannerBackend,
    loop_cfg: &LoopConfig,
    bench: &BenchConfig,
    embedder: &dyn Embedder,
) -> Result<Vec<Option<SeedRun>>, BenchError> {
    use rayon::prelude::*;
    seeds.par_iter().map(|s| run_seed(sampler, *s, backend, loop_cfg, bench, embedder)).collect()
}

/// One batch: for each seed, plan a sampled scenario, let a simulated person
/// correct the result, learn from the correction, and check the learned
/// preference on held-out scenarios. Output order follows `seeds`.
pub fn run_benchmark(
    activity: &str,
    sampler: &Sampler<'_>,
    seeds: &[u64],
    backend: &dyn PlannerBackend,
    loop_cfg: &LoopConfig,
    bench: &BenchConfig,
    embedder: &dyn Embedder,
) -> Result<BatchReport, BenchError> {
    let tag = match seeds.first() {
        Some(s) => sampler(*s)?.ground_truth.tag,
        None => return Err(BenchError::EmptyBatch),
    };
    let (raws, runs): (Vec<_>, Vec<_>) =
        run_seeds(sampler, seeds, backend, loop_cfg, bench, embedder)?.into_iter().flatten().unzip();
    let reports = score(&raws)?;
    let feasible_runs = raws.iter().filter(|r| r.get("feasibility") == Some(&1.0)).count();
    let mut raw_means = BTreeMap::new();
    let mut normalized_means = BTreeMap::new();
    for m in METRICS {
        if let Some(v) = mean(reports.iter().filter_map(|r| r.raw.get(m).copied())) {
            raw_means.insert(m.to_string(), v);
        }
        if let Some(v) = mean(reports.iter().filter_map(|r| r.normalized.get(m).copied())) {
            normalized_means.insert(m.to_string(), v);
        }
    }
    Ok(BatchReport {
        activity: activity.to_string(),
        ground_truth_tag: tag,
        runs,
        reports,
        feasible_runs,
        raw_means,
        normalized_means,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows() {
        assert_eq!(ActivityType::Tidy.row(), ActivityRow { objects: 14, states: 10, actions: 10, amount: 150 });
        assert_eq!(ActivityType::Clean.row().objects, 21);
        assert_eq!(ActivityType::PackUnpack.row().objects, 19);
        assert_eq!(ActivityType::LoadUnload.row().objects, 17);
    }

    #[test]
    fn scenarios_validate_and_repeat() {
        for a in ActivityType::ALL {
            for seed in 0..20 {
                let spec = ScenarioSpec::new(a, seed);
                let s = sample_scenario(&spec).unwrap();
                assert!(s.scene.validate().is_ok(), "{a:?} {seed}: {:?}", s.scene.validate());
                assert_eq!(s, sample_scenario(&spec).unwrap());
                let n = s.scene.nodes.values().filter(|n| n.is_movable()).count();
                let [lo, hi] = spec.object_count_range;
                assert!((lo..=hi).contains(&n));
            }
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = ScenarioSpec::new(ActivityType::Tidy, 1);
        spec.object_count_range = [5, 3];
        assert!(spec.validate().is_err());
        let mut spec = ScenarioSpec::new(ActivityType::LoadUnload, 1);
        spec.action_vocabulary.push(Primitive::Slice);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn mix_rule_examples() {
        assert_eq!(mix_or_separate(2, 7), "mix");
        assert_eq!(mix_or_separate(7, 2), "mix");
        assert_eq!(mix_or_separate(3, 3), "separate");
        assert_eq!(mix_or_separate(3, 6), "separate");
    }

    #[test]
    fn normalization() {
        assert_eq!(min_max_normalize(&[2.0, 4.0, 6.0]).unwrap(), alloc::vec![0.0, 5.0, 10.0]);
        assert_eq!(min_max_normalize(&[3.0, 3.0]).unwrap(), alloc::vec![5.0, 5.0]);
        assert_eq!(min_max_normalize(&[]), Err(BenchError::EmptyBatch));
        assert_eq!(score(&[]), Err(BenchError::EmptyBatch));
    }

    fn two_stack() -> SceneGraph {
        SceneGraph::new()
            .with_node(table())
            .with_node(ObjectNode::new("book_1", "book", [0.1, 0.14, 0.02], 0.6))
            .with_node(ObjectNode::new("book_2", "book", [0.1, 0.14, 0.02], 0.6))
            .with_edge(Relation::observed(RelationKind::On, "table", "book_1"))
            .with_edge(Relation::observed(RelationKind::On, "book_1", "book_2"))
    }

    #[test]
    fn stacking_predicates() {
        let g = two_stack();
        assert!(!preference_predicate("no_stacking", &g).unwrap());
        assert!(!preference_predicate("no_identical_stacking", &g).unwrap());
        assert!(preference_predicate("separate", &g).unwrap());
        assert!(!preference_predicate("mix", &g).unwrap());
        let flat = simulate_adjustment("no_stacking", &g).unwrap().unwrap();
        assert!(preference_predicate("no_stacking", &flat).unwrap());
        assert!(matches!(preference_predicate("tidy_vibes", &g), Err(BenchError::UnknownPreferenceTag(_))));
    }

    #[test]
    fn same_container_split_is_false() {
        let cart = |id: &str| {
            let mut n = ObjectNode::base(id, "cart", [0.5, 0.35, 0.3], 12.0);
            n.is_container = true;
            n.states.insert(crate::scene_graph::OPEN.into(), true);
            n
        };
        let g = SceneGraph::new()
            .with_node(cart("cart_1"))
            .with_node(cart("cart_2"))
            .with_node(ObjectNode::new("milk_1", "milk", [0.045, 0.045, 0.12], 1.0))
            .with_node(ObjectNode::new("can_1", "can", [0.035, 0.035, 0.06], 0.4))
            .with_edge(Relation::observed(RelationKind::In, "cart_1", "milk_1"))
            .with_edge(Relation::observed(RelationKind::In, "cart_2", "can_1"));
        assert!(!preference_predicate("same_container", &g).unwrap());
        let fixed = simulate_adjustment("same_container", &g).unwrap().unwrap();
        assert!(preference_predicate("same_container", &fixed).unwrap());
    }

    #[test]
    fn tabletop_catalog_size() {
        assert_eq!(TABLETOP_CATEGORIES.len(), 7);
        assert_eq!(tabletop_items().len(), 26);
        let g = sample_tabletop(3);
        let n = g.nodes.len() - 1;
        assert!((3..=5).contains(&n));
    }
}
