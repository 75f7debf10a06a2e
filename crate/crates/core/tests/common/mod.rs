//! Shared generators, oracles and acceptance criteria for the integration tests.
#![allow(dead_code)]

pub mod criteria;
pub mod oracles;

use std::f64::consts::TAU;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tidyloop_core::scene_graph::{ObjectNode, Pose, Relation, RelationKind, SceneGraph};

/// A base plus up to 9 movables in a random support forest with arbitrary poses.
pub fn random_scene(rng: &mut ChaCha8Rng) -> SceneGraph {
    let mut g = SceneGraph::new().with_node(
        ObjectNode::base("table", "table", [0.8, 0.6, 0.02], 30.0)
            .with_pose(Pose::new([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.74], 0.0)),
    );
    let with_shelf = rng.random_bool(0.2);
    if with_shelf {
        g.add_node(
            ObjectNode::base("shelf", "shelf", [0.4, 0.2, 0.02], 10.0).with_pose(Pose::new([2.0, 0.0, 1.2], 0.0)),
        );
    }
    let n = if with_shelf { rng.random_range(2..=8) } else { rng.random_range(1..=9) };
    let mut parents = vec!["table".to_string()];
    for i in 0..n {
        let id = format!("o{i}");
        let half = if rng.random_bool(0.1) {
            let s = rng.random_range(0.02..0.2);
            [s, s, rng.random_range(0.01..0.1)]
        } else {
            [rng.random_range(0.02..0.2), rng.random_range(0.02..0.2), rng.random_range(0.01..0.1)]
        };
        let pose = Pose::new(
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.7..1.3)],
            rng.random_range(0.0..TAU),
        );
        g.add_node(ObjectNode::new(&id, "thing", half, rng.random_range(0.05..3.0)).with_pose(pose));
        let parent = if with_shelf && i == n - 1 {
            "shelf".to_string()
        } else {
            parents[rng.random_range(0..parents.len())].clone()
        };
        g.edges.push(Relation::observed(RelationKind::On, &parent, &id));
        parents.push(id);
    }
    g
}
