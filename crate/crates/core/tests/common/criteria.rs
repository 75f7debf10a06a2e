//! The acceptance criteria. Each returns a one-line summary of what was
//! measured, or why it failed.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tidyloop_core::bench_eval::{
    mix_or_separate, preference_predicate, random_layout, sample_scenario, sample_tabletop, simulate_adjustment,
    ActivityType, ScenarioSpec,
};
use tidyloop_core::geometry::footprint_overlap_area;
use tidyloop_core::llm_backend::mock::MockBackend;
use tidyloop_core::objectives::{self, orthogonality_loss, ObjectiveWeights};
use tidyloop_core::planner::{execute_symbolically, ActionStep, PhysicalError, Plan, Primitive};
use tidyloop_core::pose_synthesis::{feasibility_report, synthesize_scene, SynthesisConfig};
use tidyloop_core::preference::{similarity, HashedBagOfWords, PreferenceRecord, PreferenceSource, PreferenceStore};
use tidyloop_core::scene_graph::{Pose, RelationChange, RelationKind, SceneGraph};
use tidyloop_core::session::{LoopConfig, Session, SessionStatus, TranscriptEntry};

use super::oracles;
use super::random_scene;

pub type Outcome = Result<String, String>;
pub type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

pub const FLAT: &str = "I prefer everything to be laid flat on the table rather than stacked together";

pub fn fixtures_dir() -> String {
    format!("{}/../../fixtures", env!("CARGO_MANIFEST_DIR"))
}

pub fn fixture(name: &str) -> SceneGraph {
    let path = format!("{}/{name}.scene", fixtures_dir());
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))).unwrap()
}

fn movable_on_movable(g: &SceneGraph) -> usize {
    g.edges
        .iter()
        .filter(|e| e.kind.is_support() && g.nodes[&e.parent].is_movable() && g.nodes[&e.child].is_movable())
        .count()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn objective_correctness() -> Outcome {
    const SCENES: usize = 1000;
    const TOL: f64 = 1e-9;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b1ec7);
    let w = ObjectiveWeights::default();
    let mut worst = 0.0f64;
    for k in 0..SCENES {
        let g = random_scene(&mut rng);
        ensure!(g.validate().is_ok() && g.nodes.len() <= 10, "scene {k} is not a valid scene of at most 10 objects");
        let b = objectives::total(&g, "table", &w).map_err(|e| format!("scene {k}: {e}"))?;
        let expect = [oracles::manhattan(&g), oracles::area(&g), oracles::orth(&g), oracles::stability(&g, "table")];
        let got = [b.manhattan, b.area, b.orth, b.stability_cost];
        for (name, (e, x)) in ["manhattan", "area", "orth", "stability"].iter().zip(expect.iter().zip(got)) {
            let err = (e - x).abs();
            worst = worst.max(err);
            ensure!(err <= TOL, "scene {k} {name}: oracle {e} vs {x}");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.2} s");
    Ok(format!("{SCENES} scenes, max abs error {worst:.1e}, {secs:.2} s"))
}

pub fn geometry() -> Outcome {
    use tidyloop_core::geometry::Footprint;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mc_rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for k in 0..200 {
        let (a, b) = (oracles::random_footprint(&mut rng), oracles::random_footprint(&mut rng));
        let exact = footprint_overlap_area(&a, &b);
        let est = oracles::monte_carlo(&a, &b, &mut mc_rng);
        worst = worst.max((exact - est).abs());
        ensure!((exact - est).abs() <= 1e-2, "pair {k}: analytic {exact} vs sampled {est}");
    }
    let mut worst_inv = 0.0f64;
    for _ in 0..2000 {
        let (a, b) = (oracles::random_footprint(&mut rng), oracles::random_footprint(&mut rng));
        let ab = footprint_overlap_area(&a, &b);
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let t = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let (s, c) = phi.sin_cos();
        let moved = |f: &Footprint| {
            let p = f.center;
            Footprint::new([c * p[0] - s * p[1] + t[0], s * p[0] + c * p[1] + t[1]], f.half_extents, f.yaw + phi)
        };
        let sym = (ab - footprint_overlap_area(&b, &a)).abs();
        let rigid = (ab - footprint_overlap_area(&moved(&a), &moved(&b))).abs();
        worst_inv = worst_inv.max(sym).max(rigid);
    }
    ensure!(worst_inv <= 1e-9, "symmetry or rigid invariance off by {worst_inv:.1e}");
    Ok(format!("200 pairs, max Monte-Carlo gap {worst:.1e}; invariance max error {worst_inv:.1e}"))
}

pub fn synthesis_success() -> Outcome {
    let start = Instant::now();
    let mut ok = 0;
    for seed in 0..100u64 {
        let g = sample_tabletop(seed);
        let movables = g.nodes.values().filter(|n| n.is_movable()).count();
        ensure!((3..=5).contains(&movables), "seed {seed}: {movables} objects");
        let sol = synthesize_scene(&g, "table", &SynthesisConfig::default().with_seed(seed))
            .map_err(|e| format!("seed {seed}: {e}"))?;
        // recheck collisions and support independently of the solver's own flag
        let clean = feasibility_report(&sol.apply_to(&g), &Default::default()).is_empty();
        ensure!(clean == sol.feasible, "seed {seed}: solver says feasible={} but recheck says {clean}", sol.feasible);
        ok += usize::from(clean);
    }
    let mean = start.elapsed().as_secs_f64() / 100.0;
    ensure!(ok >= 95, "{ok}/100 feasible");
    ensure!(mean <= 2.0, "mean {mean:.3} s per scene");
    Ok(format!("{ok}/100 feasible, mean {mean:.3} s per scene"))
}

pub fn orthogonality_benefit() -> Outcome {
    let with_poses = |g: &SceneGraph, poses: &BTreeMap<String, Pose>| {
        let mut out = g.clone();
        for (id, p) in poses {
            out.node_mut(id).unwrap().pose = Some(*p);
        }
        out
    };
    let (mut opt, mut rnd) = (Vec::new(), Vec::new());
    for seed in 0..50u64 {
        let g = sample_tabletop(1000 + seed);
        let sol =
            synthesize_scene(&g, "table", &SynthesisConfig::default().with_seed(seed)).map_err(|e| e.to_string())?;
        opt.push(orthogonality_loss(&sol.apply_to(&g)).map_err(|e| e.to_string())?);
        rnd.push(orthogonality_loss(&with_poses(&g, &random_layout(&g, "table", seed))).map_err(|e| e.to_string())?);
    }
    let (o, r) = (median(opt), median(rnd));
    ensure!(o < r, "median optimized {o:.4} is not below random {r:.4}");
    Ok(format!("median L_orth optimized {o:.4} vs random {r:.4}"))
}

/// Replays a golden transcript and returns whether the text is identical.
pub fn replay_golden(path: &str) -> Result<bool, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
    let recorded: Session = serde_json::from_str(&text).map_err(|e| format!("{path}: {e}"))?;
    let again = recorded.replayed(&MockBackend::default());
    let mut out = serde_json::to_string_pretty(&again).unwrap();
    out.push('\n');
    Ok(out == text)
}

pub fn executor_rules() -> Outcome {
    let g = fixture("lunchbox");
    let bad = Plan::new(&g, vec![ActionStep::binary(Primitive::PutIn, "lunchbox", "apple")], BTreeMap::new());
    let out = execute_symbolically(&g, &bad);
    ensure!(
        matches!(&out.physical_errors[..], [PhysicalError::ContainerClosed { step: 0, .. }]),
        "put_in before open gave {:?}",
        out.physical_errors
    );

    let mut s = Session::new("lb", g, "Pack the lunch into the lunchbox.", LoopConfig::default());
    s.run_loop(&MockBackend::default()).map_err(|e| e.to_string())?;
    ensure!(s.status == SessionStatus::Converged && s.loop_iteration <= 2, "{:?} after {}", s.status, s.loop_iteration);
    let first_closed = s.transcript.entries.iter().any(|e| match e {
        TranscriptEntry::Iteration(r) => {
            r.index == 0 && r.events.iter().any(|ev| format!("{:?}", ev.payload).contains("ContainerClosed"))
        }
        _ => false,
    });
    ensure!(first_closed, "first iteration does not report ContainerClosed");

    let dir = format!("{}/golden", fixtures_dir());
    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|e| format!("{dir}: {e}"))?
        .flatten()
        .map(|e| e.path().display().to_string())
        .filter(|p| p.ends_with(".transcript.json"))
        .collect();
    names.sort();
    ensure!(!names.is_empty(), "no golden transcripts in {dir}");
    for p in &names {
        ensure!(replay_golden(p)?, "{p} replays differently");
    }
    Ok(format!(
        "ContainerClosed detected; converged in {} iterations; {} golden transcripts identical",
        s.loop_iteration,
        names.len()
    ))
}

fn plural(word: &str) -> String {
    if word.ends_with('s') || word.ends_with("sh") || word.ends_with("ch") || word.ends_with('x') {
        format!("{word}es")
    } else {
        format!("{word}s")
    }
}

pub fn preference_loop() -> Outcome {
    let mock = MockBackend::default();
    let mut s = Session::new("t5", fixture("table5"), "Tidy the table.", LoopConfig::default());
    s.run_loop(&mock).map_err(|e| e.to_string())?;
    let before = s.plan.as_ref().unwrap().goal.clone();
    let pred_before = preference_predicate("no_stacking", &before).map_err(|e| e.to_string())?;
    s.add_preference(FLAT).map_err(|e| e.to_string())?;
    s.run_loop(&mock).map_err(|e| e.to_string())?;
    let after = s.plan.as_ref().unwrap().goal.clone();
    let pred_after = preference_predicate("no_stacking", &after).map_err(|e| e.to_string())?;
    let stacks = movable_on_movable(&after);
    ensure!(stacks == 0, "{stacks} movable-on-movable edges remain");
    ensure!(!pred_before && pred_after, "no_stacking went {pred_before} -> {pred_after}");

    let mut t = Session::new("t5", fixture("table5"), "Tidy the table.", LoopConfig::default());
    t.run_loop(&mock).map_err(|e| e.to_string())?;
    let scene = t.current_scene();
    let adjusted = simulate_adjustment("no_stacking", &scene).map_err(|e| e.to_string())?.ok_or("nothing to adjust")?;
    let record = t.add_adjustment(adjusted, &mock).map_err(|e| e.to_string())?;
    let moved = record
        .evidence
        .iter()
        .find_map(|c| match c {
            RelationChange::Added { relation } if relation.kind == RelationKind::On => Some(relation.clone()),
            _ => None,
        })
        .ok_or("adjustment evidence has no new support")?;
    let label = |id: &str| scene.nodes[id].label.replace('_', " ");
    let truth = format!(
        "I prefer {} to be placed directly on the {} rather than stacked.",
        plural(&label(&moved.child)),
        label(&moved.parent)
    );
    let sim = similarity(&record.text, &truth, &HashedBagOfWords).map_err(|e| e.to_string())?;
    ensure!(sim == 1.0, "similarity {sim} for {:?}", record.text);
    Ok(format!("stacks {} -> 0, no_stacking false -> true, pref_learn {sim}", movable_on_movable(&before)))
}

pub const STACKING: [&str; 9] = [
    "Do not stack the plates on the bowls.",
    "I prefer books laid flat rather than stacked.",
    "No stacking of the mugs please.",
    "Keep the notebooks not stacked on each other.",
    "I prefer cups placed directly on the table rather than stacked.",
    "Avoid stacking everything into one tower.",
    "Don't stack the magazines on the laptop.",
    "I prefer glasses not stacked inside each other.",
    "Lay flat the towels instead of piling them.",
];

pub fn profiling() -> Outcome {
    let budget = 60;
    let mut store = PreferenceStore::new(budget);
    for (i, t) in STACKING.iter().enumerate() {
        store.ingest_instruction(t, i as u64).map_err(|e| e.to_string())?;
    }
    let seeded = store.token_estimate();
    ensure!(seeded > budget && store.needs_profile(), "store of {seeded} tokens does not ask for a profile");

    let mut s = Session::new("p", fixture("table5"), "Tidy the table.", LoopConfig::default()).with_store(store);
    s.step(&MockBackend::default()).map_err(|e| e.to_string())?;
    let created = match s.transcript.entries.first() {
        Some(TranscriptEntry::Profile { created }) => created.len(),
        _ => return Err("first transcript entry is not a profile pass".into()),
    };
    let after = s.store.token_estimate();
    ensure!(after <= budget, "post-profile store is {after} tokens");

    // persistence as JSON lines
    let lines: Vec<String> = s.store.records.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    let records: Vec<PreferenceRecord> = lines.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    let back = PreferenceStore::from_records(records, budget);
    ensure!(back.records == s.store.records, "records changed across the round trip");
    let mut links = 0;
    for r in back.records.iter().filter(|r| r.source == PreferenceSource::Profile) {
        for parent in &r.derived_from {
            ensure!(back.get(parent).is_some_and(|p| p.archived), "{} lost parent {parent}", r.id);
            links += 1;
        }
    }
    ensure!(links >= STACKING.len(), "only {links} lineage links");
    Ok(format!(
        "{seeded} -> {after} tokens (budget {budget}), {created} profile record(s), {links} lineage links intact"
    ))
}

pub fn benchmark_sampler() -> Outcome {
    let spec = ScenarioSpec::new(ActivityType::Tidy, 0);
    let mut means = Vec::new();
    for batch in 0..5u64 {
        let mut total = 0usize;
        for k in 0..100 {
            let sc = sample_scenario(&spec.with_seed(batch * 1000 + k)).map_err(|e| e.to_string())?;
            total += sc.scene.nodes.values().filter(|n| n.is_movable()).count();
        }
        let mean = total as f64 / 100.0;
        ensure!((mean - 14.0).abs() <= 2.0, "batch {batch}: mean {mean}");
        means.push(format!("{mean:.2}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let n: usize = rng.random_range(2..40);
        let boxes = rng.random_range(0..=n);
        let got = mix_or_separate(boxes, n - boxes);
        ensure!(got == oracles::thirds_rule(boxes, n), "{boxes} boxes of {n}: {got}");
    }
    Ok(format!("tidy batch means [{}]; 100/100 mix-or-separate splits correct", means.join(", ")))
}

pub const ALL: [Criterion; 8] = [
    ("objective correctness", objective_correctness),
    ("geometry", geometry),
    ("pose synthesis success", synthesis_success),
    ("orthogonality benefit", orthogonality_benefit),
    ("executor rules", executor_rules),
    ("preference loop", preference_loop),
    ("profiling", profiling),
    ("benchmark sampler", benchmark_sampler),
];
