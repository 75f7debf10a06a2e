//! Invariants over generated inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tidyloop_core::bench_eval::{
    min_max_normalize, mix_or_separate, sample_nonsemantic, sample_scenario, sample_tabletop, ActivityType,
    ScenarioSpec, MIX_PREFERENCE, SEPARATE_PREFERENCE,
};
use tidyloop_core::geometry::{collides, footprint_overlap_area, supports, Footprint, PlacedBox};
use tidyloop_core::llm_backend::mock::{MockBackend, MockRules};
use tidyloop_core::llm_backend::{parse_stage_output, render, Caller, ProfileItem, Stage, StagePayload};
use tidyloop_core::math::rotate;
use tidyloop_core::objectives::{self, ObjectiveWeights};
use tidyloop_core::planner::{categorize, execute_symbolically, ActionStep, Plan, Primitive, TaskContext};
use tidyloop_core::pose_synthesis::{synthesize_scene_traced, SynthesisConfig};
use tidyloop_core::preference::{similarity, HashedBagOfWords, PreferenceStore};
use tidyloop_core::scene_graph::{ObjectNode, Pose, Relation, RelationKind, SceneGraph};

mod common;
use common::random_scene;

fn scene(seed: u64) -> SceneGraph {
    random_scene(&mut ChaCha8Rng::seed_from_u64(seed))
}

fn footprint() -> impl Strategy<Value = Footprint> {
    (-0.5..0.5f64, -0.5..0.5f64, 0.02..0.4f64, 0.02..0.4f64, 0.0..TAU)
        .prop_map(|(x, y, hx, hy, yaw)| Footprint::new([x, y], [hx, hy], yaw))
}

fn placed_box() -> impl Strategy<Value = PlacedBox> {
    (footprint(), 0.0..0.5f64, 0.01..0.2f64).prop_map(|(f, z, hz)| {
        PlacedBox::new([f.center[0], f.center[1], z], [f.half_extents[0], f.half_extents[1], hz], f.yaw)
    })
}

fn shifted(g: &SceneGraph, d: [f64; 3]) -> SceneGraph {
    let mut out = g.clone();
    for n in out.nodes.values_mut() {
        let p = n.pose.unwrap();
        n.pose = Some(Pose::new([p.position[0] + d[0], p.position[1] + d[1], p.position[2] + d[2]], p.yaw));
    }
    out
}

fn corners(f: &Footprint) -> Vec<[f64; 2]> {
    let (s, c) = f.yaw.sin_cos();
    let [hx, hy] = f.half_extents;
    [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
        .iter()
        .map(|(u, v)| [f.center[0] + c * u * hx - s * v * hy, f.center[1] + s * u * hx + c * v * hy])
        .collect()
}

/// Overlap area by clipping one rectangle against the other's edges.
fn clipped_area(a: &Footprint, b: &Footprint) -> f64 {
    let mut poly = corners(a);
    let clip = corners(b);
    for k in 0..4 {
        let (p, q) = (clip[k], clip[(k + 1) % 4]);
        let side = |x: [f64; 2]| (q[0] - p[0]) * (x[1] - p[1]) - (q[1] - p[1]) * (x[0] - p[0]);
        let mut out = Vec::new();
        for i in 0..poly.len() {
            let (cur, next) = (poly[i], poly[(i + 1) % poly.len()]);
            let (sc, sn) = (side(cur), side(next));
            if sc >= 0.0 {
                out.push(cur);
            }
            if (sc >= 0.0) != (sn >= 0.0) {
                let t = sc / (sc - sn);
                out.push([cur[0] + t * (next[0] - cur[0]), cur[1] + t * (next[1] - cur[1])]);
            }
        }
        poly = out;
        if poly.is_empty() {
            return 0.0;
        }
    }
    let n = poly.len();
    (0..n).map(|i| poly[i][0] * poly[(i + 1) % n][1] - poly[(i + 1) % n][0] * poly[i][1]).sum::<f64>().abs() / 2.0
}

/// Table plus six movables, with a random support forest and random open states.
fn paired_scenes(seed: u64) -> (SceneGraph, SceneGraph) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let make = |rng: &mut ChaCha8Rng| {
        let mut g = SceneGraph::new().with_node(ObjectNode::base("table", "table", [1.0, 1.0, 0.02], 20.0));
        let ids = ["a", "b", "c", "d", "e", "f"];
        for (i, id) in ids.iter().enumerate() {
            let open = rng.random_bool(0.5);
            g.add_node(ObjectNode::container(id, "box", [0.1, 0.1, 0.05], 1.0, open));
            let parent = if i == 0 || rng.random_bool(0.5) { "table" } else { ids[rng.random_range(0..i)] };
            let kind = if parent != "table" && rng.random_bool(0.3) { RelationKind::In } else { RelationKind::On };
            g.edges.push(Relation::observed(kind, parent, id));
            if i > 0 && rng.random_bool(0.3) {
                g.edges.push(Relation::observed(RelationKind::Near, ids[rng.random_range(0..i)], id));
            }
        }
        g
    };
    (make(&mut rng), make(&mut rng))
}

fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,7}"
}

fn step() -> impl Strategy<Value = ActionStep> {
    let unary = (prop::sample::select(vec![Primitive::Open, Primitive::Close, Primitive::Slice]), ident())
        .prop_map(|(p, t)| ActionStep::unary(p, &t));
    let binary = (
        prop::sample::select(vec![Primitive::PutOn, Primitive::PutIn, Primitive::PutNear, Primitive::Group]),
        ident(),
        ident(),
        prop::option::of(prop::sample::select(vec![RelationKind::LeftOf, RelationKind::Behind])),
    )
        .prop_map(|(p, a, b, rel)| {
            let s = ActionStep::binary(p, &a, &b);
            match rel {
                Some(k) if p == Primitive::PutNear => s.with_relation(k),
                _ => s,
            }
        });
    prop_oneof![unary, binary]
}

fn payload() -> impl Strategy<Value = (Stage, StagePayload)> {
    let line = "[A-Za-z][A-Za-z0-9 ,.']{0,40}[a-z.]";
    prop_oneof![
        prop::collection::vec((ident(), prop::collection::vec(ident(), 1..4)), 1..4)
            .prop_map(|g| (Stage::Categorize, StagePayload::Groups(g))),
        prop::collection::vec(step(), 1..6).prop_map(|s| (Stage::Intergroup, StagePayload::Steps(s))),
        (line, prop::collection::vec(ident(), 0..3))
            .prop_map(|(text, tags)| (Stage::SummarizeAdjustment, StagePayload::Summary { text, tags })),
        prop::collection::vec((prop::collection::vec(1u32..99, 2..4), line), 1..3).prop_map(|items| {
            let items = items
                .into_iter()
                .map(|(ps, text)| ProfileItem { parents: ps.iter().map(|p| format!("pref-{p}")).collect(), text })
                .collect();
            (Stage::Profile, StagePayload::Profile(items))
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn depth_levels_partition_nodes(seed in any::<u64>()) {
        let g = scene(seed);
        let levels = g.depth_levels().unwrap();
        let mut seen = BTreeSet::new();
        for ids in levels.values() {
            for id in ids {
                prop_assert!(seen.insert(id.clone()), "{id} on two levels");
            }
        }
        prop_assert_eq!(seen, g.nodes.keys().cloned().collect::<BTreeSet<_>>());
        // a supported child sits exactly one level below its parent
        let level_of: BTreeMap<_, _> = levels.iter().flat_map(|(l, ids)| ids.iter().map(move |i| (i.clone(), *l))).collect();
        for e in g.edges.iter().filter(|e| e.kind.is_support()) {
            prop_assert_eq!(level_of[&e.child], level_of[&e.parent] + 1);
        }
    }

    #[test]
    fn diff_reverses_and_applies(seed in any::<u64>()) {
        let (ga, gb) = paired_scenes(seed);
        let forward = ga.diff(&gb).unwrap();
        let backward = gb.diff(&ga).unwrap();
        let rev: BTreeSet<String> = forward.iter().map(|c| serde_json::to_string(&c.reversed()).unwrap()).collect();
        let back: BTreeSet<String> = backward.iter().map(|c| serde_json::to_string(c).unwrap()).collect();
        prop_assert_eq!(rev, back);
        let mut applied = ga.clone();
        applied.apply_changes(&forward).unwrap();
        prop_assert_eq!(applied.edge_keys(), gb.edge_keys());
        prop_assert!(applied.same_relations_and_states(&gb));
    }

    #[test]
    fn diff_with_itself_is_empty(seed in any::<u64>()) {
        let g = scene(seed);
        prop_assert!(g.diff(&g).unwrap().is_empty());
        prop_assert!(g.diff_with_poses(&g).unwrap().is_empty());
    }

    #[test]
    fn overlap_is_symmetric_and_bounded(a in footprint(), b in footprint()) {
        let ab = footprint_overlap_area(&a, &b);
        prop_assert!((ab - footprint_overlap_area(&b, &a)).abs() <= 1e-9);
        prop_assert!(ab >= 0.0);
        prop_assert!(ab <= a.area().min(b.area()) + 1e-9);
        prop_assert!((ab - clipped_area(&a, &b)).abs() <= 1e-9);
    }

    #[test]
    fn collision_is_symmetric_and_excludes_support(a in placed_box(), b in placed_box()) {
        prop_assert_eq!(collides(&a, &b), collides(&b, &a));
        if supports(&a, &b, 0.0) {
            prop_assert!(!collides(&a, &b));
        }
        // stack b exactly on a: support holds and there is no collision
        let top = PlacedBox::new(
            [a.footprint.center[0], a.footprint.center[1], a.z.top + (b.z.top - b.z.bottom) / 2.0],
            [b.footprint.half_extents[0], b.footprint.half_extents[1], (b.z.top - b.z.bottom) / 2.0],
            b.footprint.yaw,
        );
        prop_assert!(supports(&a, &top, 0.0));
        prop_assert!(!collides(&a, &top));
    }

    #[test]
    fn losses_are_nonnegative_and_translation_invariant(seed in any::<u64>(), dx in -3.0..3.0f64, dy in -3.0..3.0f64, dz in -1.0..1.0f64) {
        let g = scene(seed);
        let w = ObjectiveWeights::default();
        let b = objectives::total(&g, "table", &w).unwrap();
        for v in [b.manhattan, b.area, b.orth, b.collision_penalty, b.stability_cost, b.total] {
            prop_assert!(v >= 0.0);
        }
        let m = objectives::total(&shifted(&g, [dx, dy, dz]), "table", &w).unwrap();
        for (x, y) in [(b.manhattan, m.manhattan), (b.area, m.area), (b.orth, m.orth), (b.stability_cost, m.stability_cost)] {
            prop_assert!((x - y).abs() <= 1e-9 * x.max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn orthogonality_ignores_common_small_rotation(base in prop::collection::vec(0.05..0.6f64, 2..8), delta in -0.04..0.04f64) {
        // every main axis stays inside one quadrant, so a shared offset leaves the variance unchanged
        let mut g = SceneGraph::new().with_node(ObjectNode::base("table", "table", [1.0, 1.0, 0.02], 20.0).with_pose(Pose::new([0.0; 3], 0.0)));
        for (i, yaw) in base.iter().enumerate() {
            let id = format!("o{i}");
            g.add_node(ObjectNode::new(&id, "box", [0.1, 0.05, 0.05], 1.0).with_pose(Pose::new([i as f64 * 0.1, 0.0, 0.07], *yaw)));
        }
        let before = objectives::orthogonality_loss(&g).unwrap();
        for n in g.nodes.values_mut().filter(|n| !n.is_base) {
            let p = n.pose.unwrap();
            n.pose = Some(Pose::new(p.position, p.yaw + delta));
        }
        prop_assert!((before - objectives::orthogonality_loss(&g).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn collision_penalty_zero_iff_no_colliding_pair(seed in any::<u64>()) {
        let g = scene(seed);
        let ids: Vec<String> = g.nodes.keys().cloned().collect();
        let boxes = objectives::placed_boxes(&g, &ids).unwrap();
        let any_hit = objectives::collision_pairs(&g, &ids).iter().any(|&(i, j)| collides(&boxes[i], &boxes[j]));
        prop_assert_eq!(objectives::collision_penalty(&g).unwrap() > 0.0, any_hit);
    }

    #[test]
    fn pose_yaw_is_normalized(yaw in -100.0..100.0f64) {
        let p = Pose::new([0.0; 3], yaw);
        prop_assert!((0.0..TAU).contains(&p.yaw));
        let k = ((yaw - p.yaw) / TAU).round();
        prop_assert!((yaw - p.yaw - k * TAU).abs() <= 1e-9);
    }

    #[test]
    fn similarity_is_reflexive_and_symmetric(a in "[a-z ]{1,30}[a-z]", b in "[a-z ]{1,30}[a-z]") {
        let e = HashedBagOfWords;
        prop_assert_eq!(similarity(&a, &a, &e).unwrap(), 1.0);
        let (ab, ba) = (similarity(&a, &b, &e).unwrap(), similarity(&b, &a, &e).unwrap());
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn render_then_parse_is_identity((stage, p) in payload()) {
        let text = render(&p);
        prop_assert_eq!(parse_stage_output(&text, stage).unwrap(), p);
    }

    #[test]
    fn normalization_is_monotone_and_bounded(v in prop::collection::vec(-1e3..1e3f64, 1..20)) {
        let n = min_max_normalize(&v).unwrap();
        for i in 0..v.len() {
            prop_assert!((0.0..=10.0).contains(&n[i]));
            for j in 0..v.len() {
                if v[i] < v[j] {
                    prop_assert!(n[i] <= n[j]);
                }
            }
        }
    }

    #[test]
    fn mix_rule_matches_thirds(boxes in 0usize..60, cylinders in 0usize..60) {
        prop_assume!(boxes + cylinders > 0);
        let share = boxes as f64 / (boxes + cylinders) as f64;
        // exact in integers: b/n < 1/3 or b/n > 2/3
        let n = boxes + cylinders;
        let expect = if 3 * boxes < n || 3 * boxes > 2 * n { "mix" } else { "separate" };
        prop_assert_eq!(mix_or_separate(boxes, cylinders), expect);
        if !(share - 1.0 / 3.0).abs().lt(&1e-12) && !(share - 2.0 / 3.0).abs().lt(&1e-12) {
            prop_assert_eq!(expect == "mix", !(1.0 / 3.0..=2.0 / 3.0).contains(&share));
        }
    }

    #[test]
    fn sampled_scenarios_validate(seed in any::<u64>(), k in 0usize..4) {
        let a = ActivityType::ALL[k];
        let sc = sample_scenario(&ScenarioSpec::new(a, seed)).unwrap();
        prop_assert!(sc.scene.validate().is_ok());
        let movable = sc.scene.nodes.values().filter(|n| n.is_movable()).count();
        let mean = a.row().objects;
        prop_assert!(movable + 3 >= mean && movable <= mean + 3, "{movable} objects for {}", a.as_str());
        prop_assert_eq!(sc.ground_truth.tag.as_str(), a.preference_tag());
    }

    #[test]
    fn executed_plans_reach_their_goal(steps in prop::collection::vec((0usize..4, 0usize..6, 0usize..6), 1..8)) {
        let names = ["table", "box", "cup", "plate", "book", "bin"];
        let mut g = SceneGraph::new()
            .with_node(ObjectNode::base("table", "table", [0.8, 0.5, 0.02], 20.0))
            .with_node(ObjectNode::container("bin", "bin", [0.15, 0.15, 0.1], 1.0, false));
        for id in ["box", "cup", "plate", "book"] {
            g.add_node(ObjectNode::new(id, id, [0.05, 0.05, 0.03], 0.2));
            g.edges.push(Relation::observed(RelationKind::On, "table", id));
        }
        g.edges.push(Relation::observed(RelationKind::On, "table", "bin"));
        let steps: Vec<ActionStep> = steps
            .into_iter()
            .map(|(p, a, b)| match p {
                0 => ActionStep::binary(Primitive::PutOn, names[a], names[b]),
                1 => ActionStep::binary(Primitive::PutIn, names[a], names[b]),
                2 => ActionStep::unary(Primitive::Open, names[b]),
                _ => ActionStep::binary(Primitive::PutNear, names[a], names[b]),
            })
            .collect();
        let plan = Plan::new(&g, steps, BTreeMap::new());
        let out = execute_symbolically(&g, &plan);
        if out.ok {
            prop_assert!(out.final_scene.same_relations_and_states(&plan.goal));
            prop_assert!(out.final_scene.validate().is_ok());
        } else {
            prop_assert!(out.failed_step.is_some() || !out.logical_errors.is_empty());
            prop_assert!(!out.events.is_empty());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthesis_trace_invariants(seed in 0u64..10_000) {
        let g = sample_tabletop(seed);
        let cfg = SynthesisConfig::default().with_seed(seed);
        let (sol, trace) = synthesize_scene_traced(&g, "table", &cfg, true).unwrap();

        // best-so-far energies never get worse
        for run in &trace.restarts {
            for w in run.windows(2) {
                let (a, b) = (w[0], w[1]);
                prop_assert!(b.collision < a.collision || (b.collision == a.collision && b.total <= a.total));
            }
        }

        // world pose = composite placement ∘ group-local pose
        let table = g.nodes["table"].half_extents;
        let surface_top = g.nodes["table"].pose.map_or(table[2], |p| p.position[2] + table[2]);
        for group in &g.groups {
            let (_, c) = trace.composites.iter().find(|(k, _)| *k == group.placeholder()).unwrap();
            for id in &group.member_ids {
                let local = trace.local_poses[id];
                let world = sol.poses[id];
                let r = rotate([local.position[0], local.position[1]], c[2]);
                prop_assert!((world.position[0] - (c[0] + r[0])).abs() <= 1e-9);
                prop_assert!((world.position[1] - (c[1] + r[1])).abs() <= 1e-9);
                prop_assert!((world.position[2] - (local.position[2] + surface_top)).abs() <= 1e-9);
                let dyaw = (world.yaw - Pose::new([0.0; 3], local.yaw + c[2]).yaw).abs();
                prop_assert!(dyaw <= 1e-9 || (dyaw - TAU).abs() <= 1e-9);
            }
        }

        // a feasible layout passes an independent overlap and in-bounds check
        if sol.feasible {
            let placed = sol.apply_to(&g);
            let ids: Vec<String> = placed.nodes.keys().filter(|k| *k != "table").cloned().collect();
            let boxes = objectives::placed_boxes(&placed, &ids).unwrap();
            for i in 0..boxes.len() {
                for j in i + 1..boxes.len() {
                    let dz = boxes[i].z.top.min(boxes[j].z.top) - boxes[i].z.bottom.max(boxes[j].z.bottom);
                    let area = clipped_area(&boxes[i].footprint, &boxes[j].footprint);
                    prop_assert!(dz <= 1e-9 || area <= 1e-6, "{} overlaps {} by {area}", ids[i], ids[j]);
                }
                let table_fp = Footprint::new([0.0, 0.0], [table[0], table[1]], 0.0);
                prop_assert!(table_fp.contains_point(boxes[i].footprint.center));
            }
        }
    }

    #[test]
    fn categories_partition_the_movables(seed in any::<u64>(), k in 0usize..4) {
        let sc = sample_scenario(&ScenarioSpec::new(ActivityType::ALL[k], seed)).unwrap();
        let backend = MockBackend::new(MockRules::shipped());
        let mut log = Vec::new();
        let mut caller = Caller::new(&backend, &mut log);
        let ctx = TaskContext { instruction: &sc.instruction, preferences: &[], feedback: &[] };
        let cat = categorize(&sc.scene, &ctx, &mut caller).unwrap();
        let mut seen = BTreeSet::new();
        for g in &cat.groups {
            prop_assert!(!g.member_ids.is_empty());
            for id in &g.member_ids {
                prop_assert!(seen.insert(id.clone()), "{id} in two groups");
            }
        }
        let movable: BTreeSet<String> = sc.scene.nodes.values().filter(|n| n.is_movable()).map(|n| n.id.clone()).collect();
        prop_assert_eq!(seen, movable);
        prop_assert_eq!(cat.category_nodes.len(), cat.groups.len());
    }

    #[test]
    fn nonsemantic_ground_truth_follows_mix_rule(seed in any::<u64>()) {
        let sc = sample_nonsemantic(seed, [5, 10]).unwrap();
        let boxes = sc.scene.nodes.values().filter(|n| n.label == "box").count();
        let cylinders = sc.scene.nodes.values().filter(|n| n.label == "cylinder").count();
        prop_assert!((5..=10).contains(&(boxes + cylinders)));
        let text = if mix_or_separate(boxes, cylinders) == "mix" { MIX_PREFERENCE } else { SEPARATE_PREFERENCE };
        prop_assert_eq!(sc.ground_truth.text.as_str(), text);
    }

    #[test]
    fn profiling_stays_within_budget(texts in prop::collection::vec("[a-z]{3,8}( [a-z]{3,8}){4,12}", 6..14)) {
        let mut store = PreferenceStore::new(40);
        for (i, t) in texts.iter().enumerate() {
            store.ingest_instruction(&format!("I prefer {t}."), i as u64).unwrap();
        }
        prop_assume!(store.needs_profile());
        let backend = MockBackend::new(MockRules::shipped());
        let mut log = Vec::new();
        let mut caller = Caller::new(&backend, &mut log);
        let before: BTreeSet<String> = store.active().iter().map(|r| r.id.clone()).collect();
        match store.profile(&mut caller, 100) {
            Ok(created) => {
                prop_assert!(store.token_estimate() <= store.token_budget);
                for r in &created {
                    prop_assert!(r.derived_from.len() >= 2);
                    for p in &r.derived_from {
                        prop_assert!(before.contains(p));
                        prop_assert!(store.get(p).unwrap().archived);
                    }
                }
                let json = serde_json::to_string(&store).unwrap();
                let back: PreferenceStore = serde_json::from_str(&json).unwrap();
                prop_assert_eq!(back, store);
            }
            Err(_) => {
                // a failed compression leaves the store untouched
                prop_assert_eq!(store.active().iter().map(|r| r.id.clone()).collect::<BTreeSet<_>>(), before);
            }
        }
    }
}
