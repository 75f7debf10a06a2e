//! 2.5D oriented-box geometry: yaw-rotated footprints stacked along z.
//!
//! Overlap area of two footprints is computed exactly by clipping one
//! rectangle against the other (both are convex), after a cheap
//! separating-axis rejection.

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};

use crate::math::rotate;
use crate::scene_graph::ObjectNode;

/// Footprint overlap below this area (m²) does not count as a collision.
pub const COLLISION_AREA_TOLERANCE: f64 = 1e-6;
/// Face contact tolerance (m) for support checks.
pub const CONTACT_TOLERANCE: f64 = 1e-4;
/// Vertical overlap (m) at or below this is rounding noise on touching faces.
pub const Z_OVERLAP_EPSILON: f64 = 1e-9;
/// Default support margin as a fraction of the smallest footprint half-extent.
pub const DEFAULT_MARGIN_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub center: [f64; 2],
    pub half_extents: [f64; 2],
    pub yaw: f64,
}

impl Footprint {
    pub fn new(center: [f64; 2], half_extents: [f64; 2], yaw: f64) -> Self {
        Self { center, half_extents, yaw }
    }

    pub fn area(&self) -> f64 {
        4.0 * self.half_extents[0] * self.half_extents[1]
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let [hx, hy] = self.half_extents;
        let local = [[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]];
        local.map(|p| {
            let r = rotate(p, self.yaw);
            [self.center[0] + r[0], self.center[1] + r[1]]
        })
    }

    /// Coordinates of `p` in the footprint's own frame.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        rotate([p[0] - self.center[0], p[1] - self.center[1]], -self.yaw)
    }

    pub fn contains_point(&self, p: [f64; 2]) -> bool {
        self.contains_point_with_margin(p, 0.0)
    }

    /// True when `p` lies inside the footprint shrunk by `margin` on every side.
    pub fn contains_point_with_margin(&self, p: [f64; 2], margin: f64) -> bool {
        let l = self.to_local(p);
        let eps = 1e-12;
        libm::fabs(l[0]) <= self.half_extents[0] - margin + eps
            && libm::fabs(l[1]) <= self.half_extents[1] - margin + eps
    }

    /// True when every corner of `inner` lies inside `self`.
    pub fn encloses(&self, inner: &Footprint) -> bool {
        inner.corners().iter().all(|&c| self.contains_point(c))
    }

    pub fn bounding_radius(&self) -> f64 {
        libm::hypot(self.half_extents[0], self.half_extents[1])
    }

    /// Smallest half-extent along either footprint axis.
    pub fn min_half_extent(&self) -> f64 {
        self.half_extents[0].min(self.half_extents[1])
    }

    /// Axis-aligned bounds `[min_x, min_y, max_x, max_y]`.
    pub fn aabb(&self) -> [f64; 4] {
        let c = self.corners();
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for p in c {
            b[0] = b[0].min(p[0]);
            b[1] = b[1].min(p[1]);
            b[2] = b[2].max(p[0]);
            b[3] = b[3].max(p[1]);
        }
        b
    }

    /// Whether some 90°-multiple orientation of `inner` (centered) fits inside `self`.
    pub fn can_hold(&self, inner_half_extents: [f64; 2]) -> bool {
        let [rx, ry] = self.half_extents;
        let [hx, hy] = inner_half_extents;
        (hx <= rx && hy <= ry) || (hy <= rx && hx <= ry)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZInterval {
    pub bottom: f64,
    pub top: f64,
}

impl ZInterval {
    pub fn overlap(&self, other: &ZInterval) -> f64 {
        (self.top.min(other.top) - self.bottom.max(other.bottom)).max(0.0)
    }
}

/// An object reduced to its footprint and vertical extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedBox {
    pub footprint: Footprint,
    pub z: ZInterval,
}

impl PlacedBox {
    pub fn new(center: [f64; 3], half_extents: [f64; 3], yaw: f64) -> Self {
        Self {
            footprint: Footprint::new([center[0], center[1]], [half_extents[0], half_extents[1]], yaw),
            z: ZInterval { bottom: center[2] - half_extents[2], top: center[2] + half_extents[2] },
        }
    }

    /// `None` when the node has no pose yet.
    pub fn from_node(node: &ObjectNode) -> Option<Self> {
        node.pose.map(|p| Self::new(p.position, node.half_extents, p.yaw))
    }
}

/// Area of the intersection of two footprints (m²).
pub fn footprint_overlap_area(a: &Footprint, b: &Footprint) -> f64 {
    let d = [a.center[0] - b.center[0], a.center[1] - b.center[1]];
    let reach = a.bounding_radius() + b.bounding_radius();
    if d[0] * d[0] + d[1] * d[1] >= reach * reach {
        return 0.0;
    }
    let pa = a.corners();
    let pb = b.corners();
    if separated(&pa, &pb) || separated(&pb, &pa) {
        return 0.0;
    }
    let mut poly: PolyBuf = pa.iter().copied().collect();
    let mut scratch = PolyBuf::new();
    for i in 0..4 {
        let e0 = pb[i];
        let e1 = pb[(i + 1) % 4];
        clip_half_plane(&poly, e0, e1, &mut scratch);
        core::mem::swap(&mut poly, &mut scratch);
        if poly.len() < 3 {
            return 0.0;
        }
    }
    shoelace(&poly).max(0.0)
}

/// Overlap length of the vertical extents.
pub fn z_overlap(a: &PlacedBox, b: &PlacedBox) -> f64 {
    a.z.overlap(&b.z)
}

/// Positive-measure vertical overlap and footprint overlap above tolerance.
pub fn collides(a: &PlacedBox, b: &PlacedBox) -> bool {
    z_overlap(a, b) > Z_OVERLAP_EPSILON && footprint_overlap_area(&a.footprint, &b.footprint) > COLLISION_AREA_TOLERANCE
}

/// Overlap volume of two boxes when they collide, else 0.
pub fn collision_volume(a: &PlacedBox, b: &PlacedBox) -> f64 {
    let dz = z_overlap(a, b);
    if dz <= Z_OVERLAP_EPSILON {
        return 0.0;
    }
    let area = footprint_overlap_area(&a.footprint, &b.footprint);
    if area > COLLISION_AREA_TOLERANCE {
        area * dz
    } else {
        0.0
    }
}

/// Default margin for `supports`: 20% of the smallest footprint half-extent of the pair.
pub fn default_support_margin(parent: &PlacedBox, child: &PlacedBox) -> f64 {
    DEFAULT_MARGIN_FRACTION * parent.footprint.min_half_extent().min(child.footprint.min_half_extent())
}

/// Face contact plus child center inside the parent footprint shrunk by `margin`.
pub fn supports(parent: &PlacedBox, child: &PlacedBox, margin: f64) -> bool {
    libm::fabs(child.z.bottom - parent.z.top) <= CONTACT_TOLERANCE
        && parent.footprint.contains_point_with_margin(child.footprint.center, margin)
}

/// Containment rule for `in`: child rests on the container floor with its
/// center inside the container footprint shrunk by `margin`.
pub fn contains(container: &PlacedBox, child: &PlacedBox, margin: f64) -> bool {
    libm::fabs(child.z.bottom - container.z.bottom) <= CONTACT_TOLERANCE
        && container.footprint.contains_point_with_margin(child.footprint.center, margin)
}

fn separated(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> bool {
    // rectangle edges come in parallel pairs, two axes suffice
    for i in 0..2 {
        let e = [a[i + 1][0] - a[i][0], a[i + 1][1] - a[i][1]];
        let axis = [-e[1], e[0]];
        let (amin, amax) = project(a, axis);
        let (bmin, bmax) = project(b, axis);
        if amax <= bmin || bmax <= amin {
            return true;
        }
    }
    false
}

fn project(p: &[[f64; 2]; 4], axis: [f64; 2]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in p {
        let d = v[0] * axis[0] + v[1] * axis[1];
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (lo, hi)
}

#[inline]
fn side(e0: [f64; 2], e1: [f64; 2], p: [f64; 2]) -> f64 {
    (e1[0] - e0[0]) * (p[1] - e0[1]) - (e1[1] - e0[1]) * (p[0] - e0[0])
}

/// Sutherland–Hodgman step: keeps the part of `input` left of e0→e1.
fn clip_half_plane(input: &PolyBuf, e0: [f64; 2], e1: [f64; 2], out: &mut PolyBuf) {
    out.clear();
    let pts = input.as_slice();
    let n = pts.len();
    for i in 0..n {
        let cur = pts[i];
        let prev = pts[(i + n - 1) % n];
        let sc = side(e0, e1, cur);
        let sp = side(e0, e1, prev);
        if sc >= 0.0 {
            if sp < 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
            out.push(cur);
        } else if sp >= 0.0 {
            out.push(intersect(prev, cur, sp, sc));
        }
    }
}

#[inline]
fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn shoelace(p: &[[f64; 2]]) -> f64 {
    let n = p.len();
    let mut s = 0.0;
    for i in 0..n {
        let a = p[i];
        let b = p[(i + 1) % n];
        s += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * s
}

/// Clipping a quad by four half-planes never exceeds eight vertices.
type PolyBuf = ArrayVec<[f64; 2], 12>;
