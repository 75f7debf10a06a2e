//! Placement cost terms: pairwise Manhattan compactness and bounding-range
//! area per depth level, yaw-axis orthogonality variance, mass-weighted
//! stability relative to a base, and collision overlap volume.
//!
//! The `*_kernel` functions operate on plain coordinate slices so the pose
//! optimizer can evaluate them without rebuilding a scene graph.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::geometry::{collision_volume, PlacedBox};
use crate::scene_graph::{NodeId, ObjectNode, RelationKind, SceneError, SceneGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub w_manhattan: f64,
    pub w_area: f64,
    pub w_orth: f64,
    pub w_collision: f64,
    pub w_stability: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { w_manhattan: 1.0, w_area: 1.0, w_orth: 1.0, w_collision: 50.0, w_stability: 5.0 }
    }
}

impl ObjectiveWeights {
    pub fn new(w_manhattan: f64, w_area: f64, w_orth: f64, w_collision: f64, w_stability: f64) -> Self {
        Self { w_manhattan, w_area, w_orth, w_collision, w_stability }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.w_manhattan, self.w_area, self.w_orth, self.w_collision, self.w_stability]
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let w = self.as_array();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().all(|x| *x == 0.0) {
            return Err(ObjectiveError::InvalidWeights);
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        let [a, b, c, d, e] = self.as_array();
        Self::new(a * k, b * k, c * k, d * k, e * k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub manhattan: f64,
    pub area: f64,
    pub orth: f64,
    pub collision_penalty: f64,
    pub stability_cost: f64,
    pub total: f64,
}

impl ObjectiveBreakdown {
    pub fn from_components(
        manhattan: f64,
        area: f64,
        orth: f64,
        collision_penalty: f64,
        stability_cost: f64,
        w: &ObjectiveWeights,
    ) -> Self {
        let total = w.w_manhattan * manhattan
            + w.w_area * area
            + w.w_orth * orth
            + w.w_collision * collision_penalty
            + w.w_stability * stability_cost;
        Self { manhattan, area, orth, collision_penalty, stability_cost, total }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("node `{0}` has no pose")]
    UnplacedNode(NodeId),
    #[error("base `{0}` supports no movable objects")]
    EmptySupportSet(NodeId),
    #[error("unknown base `{0}`")]
    UnknownBase(NodeId),
    #[error("weights must be finite, non-negative and not all zero")]
    InvalidWeights,
    #[error(transparent)]
    Scene(#[from] SceneError),
}

// ---- kernels -------------------------------------------------------------

/// Sum of pairwise L1 distances within each level holding more than one node.
pub fn manhattan_kernel(levels: &[Vec<[f64; 3]>]) -> f64 {
    let mut sum = 0.0;
    for level in levels.iter().filter(|l| l.len() > 1) {
        for i in 0..level.len() {
            for j in (i + 1)..level.len() {
                let (a, b) = (level[i], level[j]);
                sum += libm::fabs(a[0] - b[0]) + libm::fabs(a[1] - b[1]) + libm::fabs(a[2] - b[2]);
            }
        }
    }
    sum
}

/// Product of the x and y ranges, summed over levels holding more than one node.
pub fn range_area_kernel(levels: &[Vec<[f64; 3]>]) -> f64 {
    levels
        .iter()
        .filter(|l| l.len() > 1)
        .map(|level| {
            let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
            for p in level {
                x0 = x0.min(p[0]);
                x1 = x1.max(p[0]);
                y0 = y0.min(p[1]);
                y1 = y1.max(p[1]);
            }
            (x1 - x0) * (y1 - y0)
        })
        .sum()
}

/// Acute angle in [0, π/2] between an object's main horizontal axis and the
/// world x-axis. The main axis is the longer footprint half-extent; square
/// footprints have a degenerate axis and report 0.
pub fn main_axis_angle(half_extents: [f64; 3], yaw: f64) -> f64 {
    let (hx, hy) = (half_extents[0], half_extents[1]);
    if hx == hy {
        return 0.0;
    }
    let axis = if hx > hy { yaw } else { yaw + FRAC_PI_2 };
    let a = axis - PI * libm::floor(axis / PI);
    let theta = if a > FRAC_PI_2 { PI - a } else { a };
    theta.clamp(0.0, FRAC_PI_2)
}

/// Population variance.
pub fn variance_kernel(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Mass-weighted stability cost of offsets measured from the base center.
pub fn stability_kernel(masses: &[f64], offsets: &[[f64; 3]]) -> f64 {
    let total_mass: f64 = masses.iter().sum();
    let mut norm_sum = 0.0;
    let mut moment = [0.0; 3];
    for (m, c) in masses.iter().zip(offsets) {
        norm_sum += m * norm3(*c);
        for k in 0..3 {
            moment[k] += m * c[k];
        }
    }
    (norm_sum + norm3(moment)) / total_mass
}

/// Sum of overlap volumes over the listed index pairs.
pub fn collision_kernel(boxes: &[PlacedBox], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| collision_volume(&boxes[i], &boxes[j])).sum()
}

fn norm3(v: [f64; 3]) -> f64 {
    libm::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
}

// ---- scene-level objectives ------------------------------------------------

fn position(node: &ObjectNode) -> Result<[f64; 3], ObjectiveError> {
    node.pose.map(|p| p.position).ok_or_else(|| ObjectiveError::UnplacedNode(node.id.clone()))
}

fn level_positions(g: &SceneGraph) -> Result<Vec<Vec<[f64; 3]>>, ObjectiveError> {
    g.depth_levels()?.into_values().map(|ids| ids.iter().map(|id| position(&g.nodes[id])).collect()).collect()
}

pub fn manhattan_loss(g: &SceneGraph) -> Result<f64, ObjectiveError> {
    Ok(manhattan_kernel(&level_positions(g)?))
}

/// Manhattan term plus the per-level x-range × y-range.
pub fn area_loss(g: &SceneGraph) -> Result<f64, ObjectiveError> {
    let levels = level_positions(g)?;
    Ok(manhattan_kernel(&levels) + range_area_kernel(&levels))
}

/// Variance of the main-axis angles of the movable objects.
pub fn orthogonality_loss(g: &SceneGraph) -> Result<f64, ObjectiveError> {
    let mut thetas = Vec::new();
    for node in g.nodes.values().filter(|n| n.is_movable()) {
        let pose = node.pose.ok_or_else(|| ObjectiveError::UnplacedNode(node.id.clone()))?;
        thetas.push(main_axis_angle(node.half_extents, pose.yaw));
    }
    Ok(variance_kernel(&thetas))
}

/// Stability of the movable objects supported (transitively) by `base`, with
/// each center of mass taken as the OBB center relative to the base center.
pub fn stability_cost(g: &SceneGraph, base: &str) -> Result<f64, ObjectiveError> {
    let base_node = g.node(base).ok_or_else(|| ObjectiveError::UnknownBase(base.into()))?;
    let origin = position(base_node)?;
    let mut masses = Vec::new();
    let mut offsets = Vec::new();
    for id in g.subtree(base) {
        let node = &g.nodes[&id];
        if !node.is_movable() {
            continue;
        }
        let p = position(node)?;
        masses.push(node.mass);
        offsets.push([p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]]);
    }
    if masses.is_empty() {
        return Err(ObjectiveError::EmptySupportSet(base.into()));
    }
    Ok(stability_kernel(&masses, &offsets))
}

/// Index pairs eligible for collision checks: every pair except an object
/// and a container it sits inside.
pub fn collision_pairs(g: &SceneGraph, ids: &[NodeId]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..ids.len() {
        for j in (i + 1)..ids.len() {
            if g.is_inside(&ids[i], &ids[j]) || g.is_inside(&ids[j], &ids[i]) {
                continue;
            }
            pairs.push((i, j));
        }
    }
    pairs
}

/// Overlap volume (m³) summed over colliding pairs.
pub fn collision_penalty(g: &SceneGraph) -> Result<f64, ObjectiveError> {
    let ids: Vec<NodeId> = g.nodes.keys().cloned().collect();
    let boxes = placed_boxes(g, &ids)?;
    Ok(collision_kernel(&boxes, &collision_pairs(g, &ids)))
}

pub fn placed_boxes(g: &SceneGraph, ids: &[NodeId]) -> Result<Vec<PlacedBox>, ObjectiveError> {
    ids.iter()
        .map(|id| {
            let node = &g.nodes[id];
            PlacedBox::from_node(node).ok_or_else(|| ObjectiveError::UnplacedNode(id.clone()))
        })
        .collect()
}

/// All five components and their weighted sum; stability is measured against `base`.
pub fn total(g: &SceneGraph, base: &str, weights: &ObjectiveWeights) -> Result<ObjectiveBreakdown, ObjectiveError> {
    weights.validate()?;
    let levels = level_positions(g)?;
    let manhattan = manhattan_kernel(&levels);
    let area = manhattan + range_area_kernel(&levels);
    Ok(ObjectiveBreakdown::from_components(
        manhattan,
        area,
        orthogonality_loss(g)?,
        collision_penalty(g)?,
        stability_cost(g, base)?,
        weights,
    ))
}

/// Objects that rest directly on `base` through an `on` edge.
pub fn direct_children(g: &SceneGraph, base: &str) -> Vec<String> {
    g.edges.iter().filter(|e| e.kind == RelationKind::On && e.parent == base).map(|e| e.child.clone()).collect()
}
