//! Independent reimplementations used as test oracles. None of these call
//! into the library beyond reading scene fields.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tidyloop_core::geometry::Footprint;
use tidyloop_core::scene_graph::{ObjectNode, RelationKind, SceneGraph};

pub const MC_SAMPLES: usize = 1_000_000;

pub fn depth(g: &SceneGraph, id: &str) -> usize {
    let mut d = 0;
    let mut cur = id.to_string();
    while let Some(e) = g.edges.iter().find(|e| e.child == cur && matches!(e.kind, RelationKind::On | RelationKind::In))
    {
        cur = e.parent.clone();
        d += 1;
    }
    d
}

pub fn levels(g: &SceneGraph) -> BTreeMap<usize, Vec<[f64; 3]>> {
    let mut out: BTreeMap<usize, Vec<[f64; 3]>> = BTreeMap::new();
    for (id, n) in &g.nodes {
        out.entry(depth(g, id)).or_default().push(n.pose.unwrap().position);
    }
    out
}

pub fn manhattan(g: &SceneGraph) -> f64 {
    let mut sum = 0.0;
    for pts in levels(g).values() {
        if pts.len() < 2 {
            continue;
        }
        for (i, a) in pts.iter().enumerate() {
            for b in &pts[i + 1..] {
                sum += (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs();
            }
        }
    }
    sum
}

pub fn area(g: &SceneGraph) -> f64 {
    let mut sum = manhattan(g);
    for pts in levels(g).values() {
        if pts.len() < 2 {
            continue;
        }
        let mut xs: Vec<f64> = pts.iter().map(|p| p[0]).collect();
        let mut ys: Vec<f64> = pts.iter().map(|p| p[1]).collect();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        sum += (xs[xs.len() - 1] - xs[0]) * (ys[ys.len() - 1] - ys[0]);
    }
    sum
}

/// Angle between the main-axis line and the x-axis.
pub fn theta(n: &ObjectNode) -> f64 {
    let [hx, hy, _] = n.half_extents;
    if hx == hy {
        return 0.0;
    }
    let yaw = n.pose.unwrap().yaw;
    let psi = if hx > hy { yaw } else { yaw + FRAC_PI_2 };
    psi.sin().abs().atan2(psi.cos().abs())
}

pub fn orth(g: &SceneGraph) -> f64 {
    let t: Vec<f64> = g.nodes.values().filter(|n| !n.is_base).map(theta).collect();
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t.len() as f64
}

pub fn supported_by(g: &SceneGraph, id: &str, base: &str) -> bool {
    let mut cur = id.to_string();
    while let Some(e) = g.edges.iter().find(|e| e.child == cur && e.kind.is_support()) {
        if e.parent == base {
            return true;
        }
        cur = e.parent.clone();
    }
    false
}

pub fn stability(g: &SceneGraph, base: &str) -> f64 {
    let origin = g.nodes[base].pose.unwrap().position;
    let (mut weighted_norms, mut moment, mut mass) = (0.0, [0.0; 3], 0.0);
    for (id, n) in &g.nodes {
        if n.is_base || !supported_by(g, id, base) {
            continue;
        }
        let p = n.pose.unwrap().position;
        let com = [p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]];
        weighted_norms += n.mass * (com[0] * com[0] + com[1] * com[1] + com[2] * com[2]).sqrt();
        for k in 0..3 {
            moment[k] += n.mass * com[k];
        }
        mass += n.mass;
    }
    (weighted_norms + (moment[0] * moment[0] + moment[1] * moment[1] + moment[2] * moment[2]).sqrt()) / mass
}

pub fn random_footprint(rng: &mut ChaCha8Rng) -> Footprint {
    Footprint::new(
        [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)],
        [rng.random_range(0.05..0.5), rng.random_range(0.05..0.5)],
        rng.random_range(0.0..TAU),
    )
}

/// Point test in the rectangle's own axes, written without the library.
pub fn inside(f: &Footprint, p: [f64; 2]) -> bool {
    let (s, c) = f.yaw.sin_cos();
    let d = [p[0] - f.center[0], p[1] - f.center[1]];
    let u = d[0] * c + d[1] * s;
    let v = -d[0] * s + d[1] * c;
    u.abs() <= f.half_extents[0] && v.abs() <= f.half_extents[1]
}

pub fn bounds(f: &Footprint) -> [f64; 4] {
    let (s, c) = f.yaw.sin_cos();
    let ex = f.half_extents[0] * c.abs() + f.half_extents[1] * s.abs();
    let ey = f.half_extents[0] * s.abs() + f.half_extents[1] * c.abs();
    [f.center[0] - ex, f.center[1] - ey, f.center[0] + ex, f.center[1] + ey]
}

pub fn monte_carlo(a: &Footprint, b: &Footprint, rng: &mut ChaCha8Rng) -> f64 {
    let (ba, bb) = (bounds(a), bounds(b));
    let lo = [ba[0].max(bb[0]), ba[1].max(bb[1])];
    let hi = [ba[2].min(bb[2]), ba[3].min(bb[3])];
    if lo[0] >= hi[0] || lo[1] >= hi[1] {
        return 0.0;
    }
    let mut hits = 0usize;
    for _ in 0..MC_SAMPLES {
        let p = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
        if inside(a, p) && inside(b, p) {
            hits += 1;
        }
    }
    hits as f64 / MC_SAMPLES as f64 * (hi[0] - lo[0]) * (hi[1] - lo[1])
}

/// Mix-or-separate label from the box share, in integer arithmetic:
/// below one third or above two thirds mixes.
pub fn thirds_rule(boxes: usize, total: usize) -> &'static str {
    if 3 * boxes < total || 3 * boxes > 2 * total {
        "mix"
    } else {
        "separate"
    }
}
