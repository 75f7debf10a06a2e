//! Bottom-up pose synthesis.
//!
//! Each group is laid out independently inside a copy of the surface region
//! by multi-restart simulated annealing over the planar pose `(x, y, yaw)` of
//! its support roots; stacked and contained objects ride along with their
//! parent and their height is derived, never searched. Every group is then
//! wrapped in its composite box and a second annealing pass places the
//! composites on the surface. Member poses are recovered by applying the
//! composite's rigid transform to the group-local layout.
//!
//! Collision volume acts as a hard tier in the annealer: a proposal that
//! increases it is rejected, one that reduces it is accepted, and ties fall
//! back to the Metropolis rule on the weighted objective total.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::feedback::FeedbackEvent;
use crate::geometry::{contains, default_support_margin, footprint_overlap_area, supports, Footprint, PlacedBox};
use crate::math::{derive_seed, hypot2, normalize_angle, rotate};
use crate::objectives::{self, ObjectiveBreakdown, ObjectiveError, ObjectiveWeights};
use crate::scene_graph::{
    placeholder_category, GroupDag, NodeId, ObjectNode, Pose, Relation, RelationKind, SceneGraph,
};

/// Weight of the soft penalties enforcing near/orientation relations.
pub const RELATION_PENALTY_WEIGHT: f64 = 10.0;
/// Required clearance (m) for orientation relations between centroids.
pub const ORIENTATION_MARGIN: f64 = 0.05;
/// Extra gap (m) tolerated between bounding circles of `near` pairs.
pub const NEAR_GAP: f64 = 0.1;

const REGION_ID: &str = "__region__";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub seed: u64,
    pub iterations_per_group: usize,
    pub initial_temperature: f64,
    pub cooling_rate: f64,
    pub proposal_sigma_xy: f64,
    pub proposal_sigma_yaw: f64,
    pub restarts: usize,
    pub weights: ObjectiveWeights,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations_per_group: 2000,
            initial_temperature: 1.0,
            cooling_rate: 0.995,
            proposal_sigma_xy: 0.05,
            proposal_sigma_yaw: 0.15,
            restarts: 4,
            weights: ObjectiveWeights::default(),
        }
    }
}

impl SynthesisConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), SynthesisError> {
        if self.iterations_per_group == 0 || self.restarts == 0 {
            return Err(SynthesisError::InvalidConfig("iterations and restarts must be positive"));
        }
        if !(self.cooling_rate > 0.0 && self.cooling_rate < 1.0) {
            return Err(SynthesisError::InvalidConfig("cooling_rate must lie in (0, 1)"));
        }
        if [self.proposal_sigma_xy, self.proposal_sigma_yaw].iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(SynthesisError::InvalidConfig("proposal sigmas must be positive"));
        }
        if self.initial_temperature.is_nan() || self.initial_temperature <= 0.0 {
            return Err(SynthesisError::InvalidConfig("initial_temperature must be positive"));
        }
        self.weights.validate().map_err(SynthesisError::Objective)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSolution {
    pub poses: BTreeMap<NodeId, Pose>,
    pub breakdown: ObjectiveBreakdown,
    pub feasible: bool,
    pub feedback: Vec<FeedbackEvent>,
}

impl PoseSolution {
    /// Turns an infeasible solution into `SynthesisError::Infeasible`.
    pub fn into_result(self) -> Result<PoseSolution, SynthesisError> {
        if self.feasible {
            Ok(self)
        } else {
            Err(SynthesisError::Infeasible(Box::new(self)))
        }
    }

    /// Copy of `g` with the solved poses applied.
    pub fn apply_to(&self, g: &SceneGraph) -> SceneGraph {
        let mut out = g.clone();
        for (id, pose) in &self.poses {
            if let Some(node) = out.nodes.get_mut(id) {
                node.pose = Some(*pose);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthesisError {
    #[error("object `{0}` does not fit inside the placement region")]
    RegionTooSmall(NodeId),
    #[error("no collision-free, support-valid layout found")]
    Infeasible(Box<PoseSolution>),
    #[error("`{0}` is not a base object")]
    NotABase(NodeId),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

// ---- annealer ----------------------------------------------------------------

/// Lexicographic energy: collision tier first, then the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energy {
    pub collision: f64,
    pub total: f64,
}

impl Energy {
    fn better_than(&self, other: &Energy) -> bool {
        self.collision < other.collision || (self.collision == other.collision && self.total < other.total)
    }
}

trait Landscape {
    fn unit_count(&self) -> usize;
    fn in_bounds(&self, unit: usize, state: [f64; 3]) -> bool;
    fn energy(&self, states: &[[f64; 3]], scratch: &mut Vec<[f64; 4]>) -> Energy;
}

struct AnnealRun {
    states: Vec<[f64; 3]>,
    energy: Energy,
    trace: Vec<Energy>,
}

fn anneal<L: Landscape>(
    land: &L,
    init: Vec<[f64; 3]>,
    cfg: &SynthesisConfig,
    rng: &mut ChaCha8Rng,
    keep_trace: bool,
) -> AnnealRun {
    let n = land.unit_count();
    let mut scratch = Vec::new();
    let mut current = init;
    let mut e_cur = land.energy(&current, &mut scratch);
    let mut best = current.clone();
    let mut e_best = e_cur;
    let mut trace = Vec::new();
    if n == 0 {
        return AnnealRun { states: best, energy: e_best, trace };
    }
    let xy = Normal::new(0.0, cfg.proposal_sigma_xy).expect("validated sigma");
    let yaw = Normal::new(0.0, cfg.proposal_sigma_yaw).expect("validated sigma");
    let mut temperature = cfg.initial_temperature;
    for _ in 0..cfg.iterations_per_group {
        let unit = rng.random_range(0..n);
        let old = current[unit];
        let cand = [old[0] + xy.sample(rng), old[1] + xy.sample(rng), normalize_angle(old[2] + yaw.sample(rng))];
        let u: f64 = rng.random();
        if land.in_bounds(unit, cand) {
            current[unit] = cand;
            let e_new = land.energy(&current, &mut scratch);
            let accept = if e_new.collision < e_cur.collision {
                true
            } else if e_new.collision > e_cur.collision {
                false
            } else {
                let delta = e_new.total - e_cur.total;
                delta <= 0.0 || u < libm::exp(-delta / temperature)
            };
            if accept {
                e_cur = e_new;
                if e_cur.better_than(&e_best) {
                    e_best = e_cur;
                    best.clone_from(&current);
                }
            } else {
                current[unit] = old;
            }
        }
        temperature *= cfg.cooling_rate;
        if keep_trace {
            trace.push(e_best);
        }
    }
    AnnealRun { states: best, energy: e_best, trace }
}

/// Runs every restart and keeps the best. Restart 0 starts from the plain
/// grid, later restarts from a shuffled grid assignment.
fn best_of_restarts<L: Landscape>(
    land: &L,
    grid: &[[f64; 3]],
    seed: u64,
    cfg: &SynthesisConfig,
    keep_trace: bool,
) -> (AnnealRun, Vec<Vec<Energy>>) {
    let mut best: Option<AnnealRun> = None;
    let mut traces = Vec::new();
    for r in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
        let mut init = grid.to_vec();
        if r > 0 {
            let mut slots: Vec<[f64; 2]> = grid.iter().map(|s| [s[0], s[1]]).collect();
            slots.shuffle(&mut rng);
            for (unit, slot) in slots.into_iter().enumerate() {
                let cand = [slot[0], slot[1], init[unit][2]];
                if land.in_bounds(unit, cand) {
                    init[unit] = cand;
                }
            }
        }
        let run = anneal(land, init, cfg, &mut rng, keep_trace);
        if keep_trace {
            traces.push(run.trace.clone());
        }
        if best.as_ref().is_none_or(|b| run.energy.better_than(&b.energy)) {
            best = Some(run);
        }
    }
    (best.expect("restarts > 0"), traces)
}

// ---- evaluation ------------------------------------------------------------------

/// Surface-aligned frame used for orientation semantics.
#[derive(Debug, Clone, Copy)]
struct Frame {
    origin: [f64; 2],
    yaw: f64,
}

impl Frame {
    fn local(&self, p: [f64; 2]) -> [f64; 2] {
        rotate([p[0] - self.origin[0], p[1] - self.origin[1]], -self.yaw)
    }
}

#[derive(Debug, Clone, Copy)]
struct Hinge {
    kind: RelationKind,
    parent: usize,
    child: usize,
}

fn hinge_penalty(kind: RelationKind, p: [f64; 2], c: [f64; 2], rp: f64, rc: f64) -> f64 {
    let v = match kind {
        RelationKind::LeftOf => c[0] - p[0] + ORIENTATION_MARGIN,
        RelationKind::RightOf => p[0] - c[0] + ORIENTATION_MARGIN,
        RelationKind::FrontOf => c[1] - p[1] + ORIENTATION_MARGIN,
        RelationKind::Behind => p[1] - c[1] + ORIENTATION_MARGIN,
        RelationKind::Near => hypot2([c[0] - p[0], c[1] - p[1]]) - (rp + rc + NEAR_GAP),
        RelationKind::On | RelationKind::In => 0.0,
    };
    RELATION_PENALTY_WEIGHT * v.max(0.0)
}

/// Objective evaluation over a fixed set of nodes indexed 0..n.
struct Evaluator {
    half: Vec<[f64; 3]>,
    mass: Vec<f64>,
    levels: Vec<Vec<usize>>,
    base: usize,
    stab: Vec<usize>,
    orth: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    hinges: Vec<Hinge>,
    frame: Frame,
    weights: ObjectiveWeights,
}

impl Evaluator {
    /// `scene` must hold exactly the nodes listed in `ids` plus their edges.
    fn new(
        scene: &SceneGraph,
        ids: &[NodeId],
        base: &str,
        hinge_edges: &[Relation],
        frame: Frame,
        weights: ObjectiveWeights,
    ) -> Result<Self, SynthesisError> {
        let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let levels = scene
            .depth_levels()
            .map_err(ObjectiveError::from)?
            .into_values()
            .map(|lvl| lvl.iter().map(|id| index[id.as_str()]).collect())
            .collect();
        let node = |id: &NodeId| &scene.nodes[id];
        let stab = scene.subtree(base).iter().filter(|id| node(id).is_movable()).map(|id| index[id.as_str()]).collect();
        let orth = ids.iter().enumerate().filter(|(_, id)| node(id).is_movable()).map(|(i, _)| i).collect();
        let pairs = objectives::collision_pairs(scene, ids)
            .into_iter()
            .filter(|&(i, j)| i != index[base] && j != index[base])
            .collect();
        let hinges = hinge_edges
            .iter()
            .filter_map(|e| {
                Some(Hinge {
                    kind: e.kind,
                    parent: *index.get(e.parent.as_str())?,
                    child: *index.get(e.child.as_str())?,
                })
            })
            .collect();
        Ok(Self {
            half: ids.iter().map(|id| node(id).half_extents).collect(),
            mass: ids.iter().map(|id| node(id).mass).collect(),
            levels,
            base: index[base],
            stab,
            orth,
            pairs,
            hinges,
            frame,
            weights,
        })
    }

    fn boxed(&self, poses: &[[f64; 4]], i: usize) -> PlacedBox {
        let p = poses[i];
        PlacedBox::new([p[0], p[1], p[2]], self.half[i], p[3])
    }

    fn collision(&self, poses: &[[f64; 4]]) -> f64 {
        self.pairs
            .iter()
            .map(|&(i, j)| crate::geometry::collision_volume(&self.boxed(poses, i), &self.boxed(poses, j)))
            .sum()
    }

    fn breakdown(&self, poses: &[[f64; 4]]) -> ObjectiveBreakdown {
        let levels: Vec<Vec<[f64; 3]>> =
            self.levels.iter().map(|l| l.iter().map(|&i| [poses[i][0], poses[i][1], poses[i][2]]).collect()).collect();
        let manhattan = objectives::manhattan_kernel(&levels);
        let area = manhattan + objectives::range_area_kernel(&levels);
        let thetas: Vec<f64> =
            self.orth.iter().map(|&i| objectives::main_axis_angle(self.half[i], poses[i][3])).collect();
        let orth = objectives::variance_kernel(&thetas);
        let b = poses[self.base];
        let masses: Vec<f64> = self.stab.iter().map(|&i| self.mass[i]).collect();
        let offsets: Vec<[f64; 3]> =
            self.stab.iter().map(|&i| [poses[i][0] - b[0], poses[i][1] - b[1], poses[i][2] - b[2]]).collect();
        let stability = if masses.is_empty() { 0.0 } else { objectives::stability_kernel(&masses, &offsets) };
        let collision = self.collision(poses);
        ObjectiveBreakdown::from_components(manhattan, area, orth, collision, stability, &self.weights)
    }

    fn hinge(&self, poses: &[[f64; 4]]) -> f64 {
        self.hinges
            .iter()
            .map(|h| {
                let p = self.frame.local([poses[h.parent][0], poses[h.parent][1]]);
                let c = self.frame.local([poses[h.child][0], poses[h.child][1]]);
                let rp = hypot2([self.half[h.parent][0], self.half[h.parent][1]]);
                let rc = hypot2([self.half[h.child][0], self.half[h.child][1]]);
                hinge_penalty(h.kind, p, c, rp, rc)
            })
            .sum()
    }
}

// ---- group pass ----------------------------------------------------------------

/// An object that rides on (or in) its parent.
#[derive(Debug, Clone)]
struct Attachment {
    node: usize,
    parent: usize,
    kind: RelationKind,
    offset: [f64; 2],
}

/// Layout problem for one group: roots move freely inside `region`,
/// attachments follow. Index 0 is the region's stand-in base node. Roots
/// rest at `top`, which is the floor when the surface is a container.
struct GroupLandscape {
    eval: Evaluator,
    ids: Vec<NodeId>,
    roots: Vec<usize>,
    attachments: Vec<Attachment>,
    region: Footprint,
    top: f64,
}

impl GroupLandscape {
    fn realize(&self, states: &[[f64; 3]], out: &mut Vec<[f64; 4]>) {
        out.clear();
        out.resize(self.ids.len(), [0.0; 4]);
        out[0] = [self.region.center[0], self.region.center[1], self.top - self.eval.half[0][2], self.region.yaw];
        for (k, &node) in self.roots.iter().enumerate() {
            let s = states[k];
            out[node] = [s[0], s[1], self.top + self.eval.half[node][2], s[2]];
        }
        for a in &self.attachments {
            let p = out[a.parent];
            let ph = self.eval.half[a.parent];
            let h = self.eval.half[a.node][2];
            let off = rotate(a.offset, p[3]);
            let z = match a.kind {
                RelationKind::In => p[2] - ph[2] + h,
                _ => p[2] + ph[2] + h,
            };
            out[a.node] = [p[0] + off[0], p[1] + off[1], z, p[3]];
        }
    }

    fn root_footprint(&self, k: usize, s: [f64; 3]) -> Footprint {
        let h = self.eval.half[self.roots[k]];
        Footprint::new([s[0], s[1]], [h[0], h[1]], s[2])
    }
}

impl Landscape for GroupLandscape {
    fn unit_count(&self) -> usize {
        self.roots.len()
    }

    fn in_bounds(&self, unit: usize, state: [f64; 3]) -> bool {
        self.region.encloses(&self.root_footprint(unit, state))
    }

    fn energy(&self, states: &[[f64; 3]], scratch: &mut Vec<[f64; 4]>) -> Energy {
        self.realize(states, scratch);
        let b = self.eval.breakdown(scratch);
        Energy { collision: b.collision_penalty, total: b.total + self.eval.hinge(scratch) }
    }
}

/// Grid cells across the region (in its own frame), one per unit, clamped so
/// each unit's footprint stays inside.
fn grid_scatter(region: &Footprint, halves: &[[f64; 2]]) -> Vec<[f64; 3]> {
    let n = halves.len();
    if n == 0 {
        return Vec::new();
    }
    let cols = libm::ceil(libm::sqrt(n as f64)) as usize;
    let rows = n.div_ceil(cols);
    let [rx, ry] = region.half_extents;
    halves
        .iter()
        .enumerate()
        .map(|(k, h)| {
            let (c, r) = (k % cols, k / cols);
            let mut x = -rx + (c as f64 + 0.5) * 2.0 * rx / cols as f64;
            let mut y = -ry + (r as f64 + 0.5) * 2.0 * ry / rows as f64;
            x = x.clamp(-(rx - h[0]).max(0.0), (rx - h[0]).max(0.0));
            y = y.clamp(-(ry - h[1]).max(0.0), (ry - h[1]).max(0.0));
            let w = rotate([x, y], region.yaw);
            [region.center[0] + w[0], region.center[1] + w[1], normalize_angle(region.yaw)]
        })
        .collect()
}

/// Offsets for the contents of a container: a near-square grid over its footprint.
fn container_offsets(container_half: [f64; 3], count: usize) -> Vec<[f64; 2]> {
    if count == 0 {
        return Vec::new();
    }
    let cols = libm::ceil(libm::sqrt(count as f64)) as usize;
    let rows = count.div_ceil(cols);
    let [hx, hy, _] = container_half;
    (0..count)
        .map(|k| {
            let (c, r) = (k % cols, k / cols);
            [-hx + (c as f64 + 0.5) * 2.0 * hx / cols as f64, -hy + (r as f64 + 0.5) * 2.0 * hy / rows as f64]
        })
        .collect()
}

struct GroupResult {
    /// Local poses of every synthesized node of the group (roots and attachments).
    poses: Vec<(NodeId, [f64; 4])>,
    breakdown: ObjectiveBreakdown,
    traces: Vec<Vec<Energy>>,
}

/// Builds and solves the layout of `roots` (plus their support subtrees in
/// `scene`) inside `region`, whose top surface sits at height `top`.
fn solve_group(
    scene: &SceneGraph,
    roots: &[NodeId],
    region: Footprint,
    top: f64,
    seed: u64,
    cfg: &SynthesisConfig,
    keep_trace: bool,
) -> Result<GroupResult, SynthesisError> {
    for id in roots {
        let node = scene.node(id).ok_or_else(|| SynthesisError::UnknownNode(id.clone()))?;
        if !region.can_hold([node.half_extents[0], node.half_extents[1]]) {
            return Err(SynthesisError::RegionTooSmall(id.clone()));
        }
    }
    // working scene: stand-in base + roots + their subtrees
    let mut work = SceneGraph::new();
    let base_half = [region.half_extents[0], region.half_extents[1], 0.01];
    work.add_node(ObjectNode::base(REGION_ID, "region", base_half, 1.0));
    let mut ids: Vec<NodeId> = alloc::vec![REGION_ID.to_string()];
    let mut attachments_spec: Vec<(NodeId, NodeId, RelationKind)> = Vec::new();
    for id in roots {
        let mut node = scene.nodes[id].clone();
        node.pose = None;
        work.add_node(node);
        ids.push(id.clone());
        work.edges.push(Relation::observed(RelationKind::On, REGION_ID, id));
        for child in scene.subtree(id) {
            let rel = scene.support_of(&child).expect("subtree member has a support edge").clone();
            let mut node = scene.nodes[&child].clone();
            node.pose = None;
            work.add_node(node);
            ids.push(child.clone());
            attachments_spec.push((child.clone(), rel.parent.clone(), rel.kind));
            work.edges.push(rel);
        }
    }
    // near/orientation edges between synthesized nodes of this group
    let hinge_edges: Vec<Relation> = scene
        .edges
        .iter()
        .filter(|e| {
            !e.kind.is_support() && work.contains(&e.parent) && work.contains(&e.child) && e.parent != REGION_ID
        })
        .cloned()
        .collect();
    let frame = Frame { origin: region.center, yaw: region.yaw };
    let eval = Evaluator::new(&work, &ids, REGION_ID, &hinge_edges, frame, cfg.weights)?;
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    // contents of each container get grid slots in edge order
    let mut slot_counter: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (_, parent, kind) in &attachments_spec {
        if *kind == RelationKind::In {
            slot_counter.entry(parent.as_str()).or_insert((0, 0)).1 += 1;
        }
    }
    let mut attachments = Vec::new();
    for (child, parent, kind) in &attachments_spec {
        let offset = if *kind == RelationKind::In {
            let entry = slot_counter.get_mut(parent.as_str()).expect("counted");
            let offs = container_offsets(eval.half[index[parent.as_str()]], entry.1);
            let o = offs[entry.0];
            entry.0 += 1;
            o
        } else {
            [0.0, 0.0]
        };
        attachments.push(Attachment {
            node: index[child.as_str()],
            parent: index[parent.as_str()],
            kind: *kind,
            offset,
        });
    }
    let root_idx: Vec<usize> = roots.iter().map(|id| index[id.as_str()]).collect();
    let land = GroupLandscape { eval, ids: ids.clone(), roots: root_idx, attachments, region, top };
    let halves: Vec<[f64; 2]> = land.roots.iter().map(|&i| [land.eval.half[i][0], land.eval.half[i][1]]).collect();
    let grid = grid_scatter(&region, &halves);
    let (run, traces) = best_of_restarts(&land, &grid, seed, cfg, keep_trace);
    let mut realized = Vec::new();
    land.realize(&run.states, &mut realized);
    let breakdown = land.eval.breakdown(&realized);
    let poses = ids.iter().enumerate().skip(1).map(|(i, id)| (id.clone(), realized[i])).collect();
    Ok(GroupResult { poses, breakdown, traces })
}

fn to_pose(p: [f64; 4]) -> Pose {
    Pose::new([p[0], p[1], p[2]], p[3])
}

/// Members whose support parent is not itself a member.
fn group_roots(g: &SceneGraph, members: &[NodeId]) -> Vec<NodeId> {
    members.iter().filter(|id| g.support_of(id).is_none_or(|r| !members.contains(&r.parent))).cloned().collect()
}

/// Lays out one group inside `region` (surface top at z = 0).
pub fn synthesize_group(
    g: &SceneGraph,
    group: &GroupDag,
    region: &Footprint,
    cfg: &SynthesisConfig,
) -> Result<PoseSolution, SynthesisError> {
    cfg.validate()?;
    let members: Vec<NodeId> = group.member_ids.clone();
    for id in &members {
        if !g.contains(id) {
            return Err(SynthesisError::UnknownNode(id.clone()));
        }
    }
    let mut local = SceneGraph::new();
    for id in &members {
        local.add_node(g.nodes[id].clone());
    }
    local.edges = g.edges.iter().filter(|e| local.contains(&e.parent) && local.contains(&e.child)).cloned().collect();
    let roots = group_roots(&local, &members);
    let result = solve_group(&local, &roots, *region, 0.0, cfg.seed, cfg, false)?;
    let poses: BTreeMap<NodeId, Pose> = result.poses.iter().map(|(id, p)| (id.clone(), to_pose(*p))).collect();
    // feasibility against the region stand-in
    let mut check = local.clone();
    let mut base = ObjectNode::base(REGION_ID, "region", [region.half_extents[0], region.half_extents[1], 0.01], 1.0);
    base.pose = Some(Pose::new([region.center[0], region.center[1], -0.01], region.yaw));
    check.add_node(base);
    for r in &roots {
        check.edges.push(Relation::observed(RelationKind::On, REGION_ID, r));
    }
    let feedback = feasibility_report(&check, &poses);
    Ok(PoseSolution { poses, breakdown: result.breakdown, feasible: feedback.is_empty(), feedback })
}

// ---- composite pass ----------------------------------------------------------------

struct Composite {
    half: [f64; 2],
    /// Member poses relative to the composite center, in the composite frame.
    members: Vec<(usize, [f64; 4])>,
}

struct SceneLandscape {
    eval: Evaluator,
    composites: Vec<Composite>,
    surface: Footprint,
    surface_index: usize,
    surface_pose: [f64; 4],
    node_count: usize,
    group_hinges: Vec<Hinge>,
    frame: Frame,
}

impl SceneLandscape {
    fn realize(&self, states: &[[f64; 3]], out: &mut Vec<[f64; 4]>) {
        out.clear();
        out.resize(self.node_count, [0.0; 4]);
        out[self.surface_index] = self.surface_pose;
        for (k, comp) in self.composites.iter().enumerate() {
            let s = states[k];
            for &(node, rel) in &comp.members {
                let w = rotate([rel[0], rel[1]], s[2]);
                out[node] = [s[0] + w[0], s[1] + w[1], rel[2], normalize_angle(rel[3] + s[2])];
            }
        }
    }

    fn footprint(&self, k: usize, s: [f64; 3]) -> Footprint {
        Footprint::new([s[0], s[1]], self.composites[k].half, s[2])
    }
}

impl Landscape for SceneLandscape {
    fn unit_count(&self) -> usize {
        self.composites.len()
    }

    fn in_bounds(&self, unit: usize, state: [f64; 3]) -> bool {
        self.surface.encloses(&self.footprint(unit, state))
    }

    fn energy(&self, states: &[[f64; 3]], scratch: &mut Vec<[f64; 4]>) -> Energy {
        let mut overlap = 0.0;
        for i in 0..states.len() {
            for j in (i + 1)..states.len() {
                overlap += footprint_overlap_area(&self.footprint(i, states[i]), &self.footprint(j, states[j]));
            }
        }
        self.realize(states, scratch);
        let b = self.eval.breakdown(scratch);
        let mut hinge = self.eval.hinge(scratch);
        for h in &self.group_hinges {
            let p = self.frame.local([states[h.parent][0], states[h.parent][1]]);
            let c = self.frame.local([states[h.child][0], states[h.child][1]]);
            let rp = hypot2(self.composites[h.parent].half);
            let rc = hypot2(self.composites[h.child].half);
            hinge += hinge_penalty(h.kind, p, c, rp, rc);
        }
        Energy { collision: overlap + b.collision_penalty, total: b.total + hinge }
    }
}

/// Diagnostics from a scene synthesis run, for tests and tooling.
#[derive(Debug, Clone, Default)]
pub struct SynthesisTrace {
    /// Best-so-far energies per restart, group passes first, composite pass last.
    pub restarts: Vec<Vec<Energy>>,
    /// Group-local poses (relative to each group's composite center).
    pub local_poses: BTreeMap<NodeId, Pose>,
    /// Composite placement per group key: `(x, y, yaw)`.
    pub composites: Vec<(String, [f64; 3])>,
}

struct GroupJob {
    key: String,
    roots: Vec<NodeId>,
}

/// Places everything supported by `surface`: per-group layout, then
/// composite placement honoring category-level relations.
pub fn synthesize_scene(g: &SceneGraph, surface: &str, cfg: &SynthesisConfig) -> Result<PoseSolution, SynthesisError> {
    synthesize_scene_traced(g, surface, cfg, false).map(|(s, _)| s)
}

pub fn synthesize_scene_traced(
    g: &SceneGraph,
    surface: &str,
    cfg: &SynthesisConfig,
    keep_trace: bool,
) -> Result<(PoseSolution, SynthesisTrace), SynthesisError> {
    cfg.validate()?;
    let surf = g.node(surface).ok_or_else(|| SynthesisError::UnknownNode(surface.into()))?;
    if !surf.is_base {
        return Err(SynthesisError::NotABase(surface.into()));
    }
    let surf_pose = surf.pose.unwrap_or(Pose::new([0.0; 3], 0.0));
    let surf_half = surf.half_extents;
    // contents of a base container rest on its floor
    let top =
        if surf.is_container { surf_pose.position[2] - surf_half[2] } else { surf_pose.position[2] + surf_half[2] };
    let region_world =
        Footprint::new([surf_pose.position[0], surf_pose.position[1]], [surf_half[0], surf_half[1]], surf_pose.yaw);
    let region_local = Footprint::new([0.0, 0.0], [surf_half[0], surf_half[1]], 0.0);

    let roots: Vec<NodeId> = g.supported_children(surface).map(|r| r.child.clone()).collect();
    let mut jobs: Vec<GroupJob> = Vec::new();
    let mut assigned: Vec<&NodeId> = Vec::new();
    for group in &g.groups {
        let rs: Vec<NodeId> = roots.iter().filter(|r| group.member_ids.contains(r)).cloned().collect();
        if !rs.is_empty() {
            assigned.extend(roots.iter().filter(|r| group.member_ids.contains(r)));
            jobs.push(GroupJob { key: group.placeholder(), roots: rs });
        }
    }
    for r in &roots {
        if !assigned.contains(&r) {
            jobs.push(GroupJob { key: r.clone(), roots: alloc::vec![r.clone()] });
        }
    }

    let mut trace = SynthesisTrace::default();
    let mut placed = SceneGraph::new();
    let mut final_poses: BTreeMap<NodeId, Pose> = BTreeMap::new();
    let mut surf_node = surf.clone();
    surf_node.pose = Some(surf_pose);
    placed.add_node(surf_node);
    if jobs.is_empty() {
        return Ok((
            PoseSolution {
                poses: final_poses,
                breakdown: ObjectiveBreakdown::default(),
                feasible: true,
                feedback: Vec::new(),
            },
            trace,
        ));
    }

    let results = run_group_jobs(g, &jobs, region_local, cfg, keep_trace)?;

    // composites in the group-local (surface) frame, local z relative to the surface top
    let mut ids: Vec<NodeId> = alloc::vec![surface.to_string()];
    let mut composites = Vec::new();
    for result in &results {
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for (id, p) in &result.poses {
            let h = g.nodes[id].half_extents;
            let fp = Footprint::new([p[0], p[1]], [h[0], h[1]], p[3]).aabb();
            b = [b[0].min(fp[0]), b[1].min(fp[1]), b[2].max(fp[2]), b[3].max(fp[3])];
        }
        let center = [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0];
        let half = [(b[2] - b[0]) / 2.0, (b[3] - b[1]) / 2.0];
        let mut members = Vec::new();
        for (id, p) in &result.poses {
            members.push((ids.len(), [p[0] - center[0], p[1] - center[1], p[2] + top, p[3]]));
            ids.push(id.clone());
            if keep_trace {
                trace.local_poses.insert(id.clone(), Pose::new([p[0] - center[0], p[1] - center[1], p[2]], p[3]));
            }
        }
        composites.push(Composite { half, members });
    }
    for id in ids.iter().skip(1) {
        let mut node = g.nodes[id].clone();
        node.pose = None;
        placed.add_node(node);
    }
    placed.edges =
        g.edges.iter().filter(|e| placed.contains(&e.parent) && placed.contains(&e.child)).cloned().collect();

    let frame = Frame { origin: region_world.center, yaw: region_world.yaw };
    let cross_edges: Vec<Relation> = placed
        .edges
        .iter()
        .filter(|e| !e.kind.is_support() && !same_job(&jobs, g, &e.parent, &e.child))
        .cloned()
        .collect();
    let eval = Evaluator::new(&placed, &ids, surface, &cross_edges, frame, cfg.weights)?;
    let job_index = |key: &str| jobs.iter().position(|j| j.key == key);
    let group_hinges = g
        .category_edges
        .iter()
        .filter(|e| placeholder_category(&e.parent).is_some() && placeholder_category(&e.child).is_some())
        .filter_map(|e| Some(Hinge { kind: e.kind, parent: job_index(&e.parent)?, child: job_index(&e.child)? }))
        .collect();
    let land = SceneLandscape {
        eval,
        composites,
        surface: region_world,
        surface_index: 0,
        surface_pose: [surf_pose.position[0], surf_pose.position[1], surf_pose.position[2], surf_pose.yaw],
        node_count: ids.len(),
        group_hinges,
        frame,
    };
    let mut halves: Vec<[f64; 2]> = land.composites.iter().map(|c| c.half).collect();
    // a composite wider than the surface along x is laid down rotated by 90°
    let mut yaw_offsets = Vec::new();
    for (k, h) in halves.iter_mut().enumerate() {
        if h[0] <= surf_half[0] + 1e-12 && h[1] <= surf_half[1] + 1e-12 {
            yaw_offsets.push(0.0);
        } else if h[1] <= surf_half[0] + 1e-12 && h[0] <= surf_half[1] + 1e-12 {
            *h = [h[1], h[0]];
            yaw_offsets.push(core::f64::consts::FRAC_PI_2);
        } else {
            return Err(SynthesisError::RegionTooSmall(jobs[k].key.clone()));
        }
    }
    let mut grid = grid_scatter(&region_world, &halves);
    for (s, off) in grid.iter_mut().zip(&yaw_offsets) {
        s[2] = normalize_angle(s[2] + off);
    }
    let (run, traces) = best_of_restarts(&land, &grid, derive_seed(cfg.seed, jobs.len() as u64), cfg, keep_trace);
    let mut realized = Vec::new();
    land.realize(&run.states, &mut realized);
    for (i, id) in ids.iter().enumerate().skip(1) {
        final_poses.insert(id.clone(), to_pose(realized[i]));
    }
    if keep_trace {
        for r in &results {
            trace.restarts.extend(r.traces.iter().cloned());
        }
        trace.restarts.extend(traces);
        trace.composites = jobs.iter().zip(&run.states).map(|(j, s)| (j.key.clone(), *s)).collect();
    }
    let solved = PoseSolution {
        poses: final_poses.clone(),
        breakdown: ObjectiveBreakdown::default(),
        feasible: true,
        feedback: Vec::new(),
    }
    .apply_to(&placed);
    let breakdown = objectives::total(&solved, surface, &cfg.weights)?;
    let feedback = feasibility_report(&placed, &final_poses);
    Ok((PoseSolution { poses: final_poses, breakdown, feasible: feedback.is_empty(), feedback }, trace))
}

fn same_job(jobs: &[GroupJob], g: &SceneGraph, a: &str, b: &str) -> bool {
    let ra = g.support_root_below(a, jobs);
    let rb = g.support_root_below(b, jobs);
    ra.is_some() && ra == rb
}

impl SceneGraph {
    /// Index of the job whose roots hold `id` (directly or via its support chain).
    fn support_root_below(&self, id: &str, jobs: &[GroupJob]) -> Option<usize> {
        let mut candidates: Vec<&str> = alloc::vec![id];
        candidates.extend(self.support_chain(id).iter().map(|r| r.parent.as_str()));
        candidates.iter().find_map(|c| jobs.iter().position(|j| j.roots.iter().any(|r| r == c)))
    }
}

#[cfg(not(feature = "parallel"))]
fn run_group_jobs(
    g: &SceneGraph,
    jobs: &[GroupJob],
    region: Footprint,
    cfg: &SynthesisConfig,
    keep_trace: bool,
) -> Result<Vec<GroupResult>, SynthesisError> {
    jobs.iter()
        .enumerate()
        .map(|(k, job)| solve_group(g, &job.roots, region, 0.0, derive_seed(cfg.seed, k as u64), cfg, keep_trace))
        .collect()
}

#[cfg(feature = "parallel")]
fn run_group_jobs(
    g: &SceneGraph,
    jobs: &[GroupJob],
    region: Footprint,
    cfg: &SynthesisConfig,
    keep_trace: bool,
) -> Result<Vec<GroupResult>, SynthesisError> {
    use rayon::prelude::*;
    jobs.par_iter()
        .enumerate()
        .map(|(k, job)| solve_group(g, &job.roots, region, 0.0, derive_seed(cfg.seed, k as u64), cfg, keep_trace))
        .collect()
}

// ---- feasibility ----------------------------------------------------------------

/// One event per colliding pair and per violated support/containment edge,
/// over the nodes that have a pose (from `poses` or already in `g`).
pub fn feasibility_report(g: &SceneGraph, poses: &BTreeMap<NodeId, Pose>) -> Vec<FeedbackEvent> {
    let pose_of = |id: &str| poses.get(id).copied().or_else(|| g.node(id).and_then(|n| n.pose));
    let placed: Vec<(&NodeId, PlacedBox)> = g
        .nodes
        .iter()
        .filter_map(|(id, n)| pose_of(id).map(|p| (id, PlacedBox::new(p.position, n.half_extents, p.yaw))))
        .collect();
    let incident = |a: &str, b: &str| -> Vec<Relation> {
        g.edges.iter().filter(|e| e.touches(a) || e.touches(b)).cloned().collect()
    };
    let mut events = Vec::new();
    for i in 0..placed.len() {
        for j in (i + 1)..placed.len() {
            let (a, ba) = &placed[i];
            let (b, bb) = &placed[j];
            if g.is_inside(a, b) || g.is_inside(b, a) {
                continue;
            }
            if crate::geometry::collides(ba, bb) {
                events.push(FeedbackEvent::collision(a, b, incident(a, b)));
            }
        }
    }
    let lookup: BTreeMap<&str, PlacedBox> = placed.iter().map(|(id, b)| (id.as_str(), *b)).collect();
    for e in g.edges.iter().filter(|e| e.kind.is_support()) {
        let (Some(p), Some(c)) = (lookup.get(e.parent.as_str()), lookup.get(e.child.as_str())) else {
            continue;
        };
        let margin = default_support_margin(p, c);
        let ok = match e.kind {
            RelationKind::In => contains(p, c, margin),
            _ => supports(p, c, margin),
        };
        if !ok {
            let mut rels = alloc::vec![e.clone()];
            rels.extend(g.edges.iter().filter(|x| x.touches(&e.child) && *x != e).cloned());
            events.push(FeedbackEvent::collapse(&e.child, &e.parent, rels));
        }
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::FeedbackKind;

    fn table_scene() -> SceneGraph {
        SceneGraph::new().with_node(
            ObjectNode::base("table", "table", [0.6, 0.4, 0.02], 20.0).with_pose(Pose::new([0.0, 0.0, 0.74], 0.0)),
        )
    }

    fn quick() -> SynthesisConfig {
        SynthesisConfig { iterations_per_group: 600, restarts: 2, ..SynthesisConfig::default() }
    }

    #[test]
    fn config_validation() {
        assert!(SynthesisConfig::default().validate().is_ok());
        let bad = SynthesisConfig { cooling_rate: 1.0, ..SynthesisConfig::default() };
        assert!(matches!(bad.validate(), Err(SynthesisError::InvalidConfig(_))));
        let bad = SynthesisConfig { iterations_per_group: 0, ..SynthesisConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_object_is_centered() {
        let g = table_scene().with_node(ObjectNode::new("cup", "cup", [0.04, 0.04, 0.05], 0.2));
        let group =
            GroupDag { category: "tableware".into(), member_ids: alloc::vec!["cup".into()], intra_edges: Vec::new() };
        let region = Footprint::new([0.1, -0.2], [0.5, 0.5], 0.0);
        let sol = synthesize_group(&g, &group, &region, &quick()).unwrap();
        let p = sol.poses["cup"];
        assert_eq!([p.position[0], p.position[1]], [0.1, -0.2]);
        assert!((p.position[2] - 0.05).abs() < 1e-12);
        assert!(sol.feasible);
        assert_eq!(sol.breakdown.manhattan, 0.0);
        assert_eq!(sol.breakdown.orth, 0.0);
    }

    #[test]
    fn oversized_member_rejected() {
        let g = SceneGraph::new()
            .with_node(ObjectNode::new("a", "box", [0.3, 0.3, 0.3], 1.0))
            .with_node(ObjectNode::new("b", "box", [0.3, 0.3, 0.3], 1.0));
        let group = GroupDag {
            category: "box".into(),
            member_ids: alloc::vec!["a".into(), "b".into()],
            intra_edges: Vec::new(),
        };
        let region = Footprint::new([0.0, 0.0], [0.25, 0.25], 0.0);
        assert_eq!(synthesize_group(&g, &group, &region, &quick()), Err(SynthesisError::RegionTooSmall("a".into())));
    }

    #[test]
    fn stack_follows_parent() {
        let g = table_scene()
            .with_node(ObjectNode::new("b1", "book", [0.1, 0.15, 0.02], 0.5))
            .with_node(ObjectNode::new("b2", "book", [0.1, 0.15, 0.02], 0.5))
            .with_edge(Relation::observed(RelationKind::On, "table", "b1"))
            .with_edge(Relation::observed(RelationKind::On, "b1", "b2"));
        let sol = synthesize_scene(&g, "table", &quick()).unwrap();
        assert!(sol.feasible, "{:?}", sol.feedback);
        let (p1, p2) = (sol.poses["b1"], sol.poses["b2"]);
        assert!((p2.position[2] - (p1.position[2] + 0.04)).abs() < 1e-12);
        assert_eq!(p1.position[0], p2.position[0]);
    }

    #[test]
    fn report_names_colliding_pair() {
        let g = SceneGraph::new()
            .with_node(ObjectNode::new("a", "box", [0.5; 3], 1.0).with_pose(Pose::new([0.0, 0.0, 0.5], 0.0)))
            .with_node(ObjectNode::new("b", "box", [0.5; 3], 1.0).with_pose(Pose::new([0.0, 0.0, 0.5], 0.0)));
        let events = feasibility_report(&g, &BTreeMap::new());
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, FeedbackKind::Collision);
        assert_eq!(events[0].physical().unwrap().object_ids, alloc::vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn report_flags_overhanging_cup() {
        let g = table_scene()
            .with_node(
                ObjectNode::new("cup", "cup", [0.04, 0.04, 0.05], 0.2).with_pose(Pose::new([0.63, 0.0, 0.81], 0.0)),
            )
            .with_edge(Relation::observed(RelationKind::On, "table", "cup"));
        let events = feasibility_report(&g, &BTreeMap::new());
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, FeedbackKind::Collapse);
        assert!(feasibility_report(&table_scene(), &BTreeMap::new()).is_empty());
    }

    #[test]
    fn seeds_are_spread() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }
}
