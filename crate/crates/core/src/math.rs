use core::f64::consts::{PI, TAU};

/// Independent sub-seed for the `index`-th job of a seeded run.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Wraps an angle into [0, 2π).
pub fn normalize_angle(a: f64) -> f64 {
    let r = a - TAU * libm::floor(a / TAU);
    if !(0.0..TAU).contains(&r) {
        0.0
    } else {
        r
    }
}

/// Signed smallest difference `a - b`, in (-π, π].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = normalize_angle(a - b);
    if d > PI {
        d - TAU
    } else {
        d
    }
}

#[inline]
pub fn rotate(v: [f64; 2], yaw: f64) -> [f64; 2] {
    let (s, c) = libm::sincos(yaw);
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

#[inline]
pub fn hypot2(v: [f64; 2]) -> f64 {
    libm::sqrt(v[0] * v[0] + v[1] * v[1])
}
