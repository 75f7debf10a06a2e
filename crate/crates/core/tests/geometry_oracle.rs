//! Footprint overlap: invariances, special cases, and a small Monte-Carlo
//! spot check (the 200-pair comparison is in the acceptance suite).

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tidyloop_core::geometry::{footprint_overlap_area, Footprint};

mod common;
use common::oracles::{monte_carlo, random_footprint};

#[test]
fn overlap_is_symmetric_and_rigid_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..2000 {
        let (a, b) = (random_footprint(&mut rng), random_footprint(&mut rng));
        let ab = footprint_overlap_area(&a, &b);
        assert!((ab - footprint_overlap_area(&b, &a)).abs() <= 1e-9);
        let phi: f64 = rng.random_range(0.0..TAU);
        let t = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let (s, c) = phi.sin_cos();
        let move_it = |f: &Footprint| {
            let p = f.center;
            Footprint::new([c * p[0] - s * p[1] + t[0], s * p[0] + c * p[1] + t[1]], f.half_extents, f.yaw + phi)
        };
        let moved = footprint_overlap_area(&move_it(&a), &move_it(&b));
        assert!((ab - moved).abs() <= 1e-9, "{ab} vs {moved}");
    }
}

#[test]
fn contained_and_disjoint_cases() {
    let big = Footprint::new([0.0, 0.0], [1.0, 1.0], 0.3);
    let small = Footprint::new([0.1, -0.1], [0.2, 0.1], 1.1);
    assert!((footprint_overlap_area(&big, &small) - small.area()).abs() < 1e-12);
    let far = Footprint::new([5.0, 5.0], [0.2, 0.1], 0.0);
    assert_eq!(footprint_overlap_area(&big, &far), 0.0);
    // identical rectangles overlap fully
    assert!((footprint_overlap_area(&small, &small) - small.area()).abs() < 1e-12);
}

#[test]
fn monte_carlo_spot_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mc = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let (a, b) = (random_footprint(&mut rng), random_footprint(&mut rng));
        assert!((footprint_overlap_area(&a, &b) - monte_carlo(&a, &b, &mut mc)).abs() <= 1e-2);
    }
}
