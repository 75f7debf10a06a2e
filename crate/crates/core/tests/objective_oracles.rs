//! Objective functions: standalone entry points and hand-worked values. The
//! 1000-scene oracle comparison lives in the acceptance suite.

use std::f64::consts::FRAC_PI_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tidyloop_core::objectives::{self, ObjectiveWeights};
use tidyloop_core::scene_graph::{ObjectNode, Pose, Relation, RelationKind, SceneGraph};

mod common;
use common::random_scene;

#[test]
fn standalone_losses_agree_with_breakdown() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let g = random_scene(&mut rng);
        let b = objectives::total(&g, "table", &ObjectiveWeights::default()).unwrap();
        assert_eq!(objectives::manhattan_loss(&g).unwrap(), b.manhattan);
        assert_eq!(objectives::area_loss(&g).unwrap(), b.area);
        assert_eq!(objectives::orthogonality_loss(&g).unwrap(), b.orth);
        assert_eq!(objectives::stability_cost(&g, "table").unwrap(), b.stability_cost);
        assert_eq!(objectives::collision_penalty(&g).unwrap(), b.collision_penalty);
    }
}

#[test]
fn hand_worked_values() {
    // two objects on one level: |Δx| + |Δy| + |Δz| = 0.3 + 0.4 + 0 and range product 0.3 × 0.4
    let g = SceneGraph::new()
        .with_node(ObjectNode::base("table", "table", [1.0, 1.0, 0.02], 20.0).with_pose(Pose::new([0.0; 3], 0.0)))
        .with_node(ObjectNode::new("a", "box", [0.1, 0.05, 0.05], 1.0).with_pose(Pose::new([0.0, 0.0, 0.07], 0.0)))
        .with_node(
            ObjectNode::new("b", "box", [0.1, 0.05, 0.05], 3.0).with_pose(Pose::new([0.3, 0.4, 0.07], FRAC_PI_2)),
        )
        .with_edge(Relation::observed(RelationKind::On, "table", "a"))
        .with_edge(Relation::observed(RelationKind::On, "table", "b"));
    assert!((objectives::manhattan_loss(&g).unwrap() - 0.7).abs() < 1e-12);
    assert!((objectives::area_loss(&g).unwrap() - (0.7 + 0.12)).abs() < 1e-12);
    // θ = {0, π/2}: variance (π/4)²
    assert!((objectives::orthogonality_loss(&g).unwrap() - (std::f64::consts::FRAC_PI_4).powi(2)).abs() < 1e-12);
    // CoMs (0,0,.07) and (.3,.4,.07): (1·.07 + 3·√(.25+.0049) + |(0.9, 1.2, 0.28)|) / 4
    let expect = (0.07 + 3.0 * (0.25f64 + 0.0049).sqrt() + (0.81f64 + 1.44 + 0.0784).sqrt()) / 4.0;
    assert!((objectives::stability_cost(&g, "table").unwrap() - expect).abs() < 1e-12);
}
