//! Counter-based Gaussian variates.
//!
//! Every increment the library consumes is addressed by
//! `(seed, path, step, component)` and produced by a stateless mixing
//! function, so any evaluation — bumped, warm-started, sub-solved, or run
//! under a different worker count — sees the same numbers for the same
//! address. This is what makes common random numbers a structural guarantee
//! rather than a calling convention.

/// SplitMix64 finalizer: a high-quality 64-bit mixer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Hash a four-component counter into a 64-bit word.
#[inline]
pub fn counter_word(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut z = seed ^ 0x9e3779b97f4a7c15;
    z = mix(z.wrapping_add(a.wrapping_mul(0xd1342543de82ef95)));
    z = mix(z.wrapping_add(b.wrapping_mul(0x2545f4914f6cdd1d)));
    z = mix(z.wrapping_add(c.wrapping_mul(0x9e3779b97f4a7c15)));
    mix(z)
}

#[inline]
fn to_unit(word: u64) -> f64 {
    // 53 mantissa bits, shifted into (0, 1].
    (((word >> 11) as f64) + 1.0) * (1.0 / 9007199254740992.0)
}

/// Standard normal variate addressed by `(seed, path, step, component)`.
///
/// Box–Muller on two independent counter words; only the cosine branch is
/// used so each address maps to exactly one variate.
#[inline]
pub fn standard_normal(seed: u64, path: u64, step: u64, component: u64) -> f64 {
    let key = step.wrapping_mul(0x100000001) ^ component;
    let u1 = to_unit(counter_word(seed, path, key, 0));
    let u2 = to_unit(counter_word(seed, path, key, 1));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform variate in [0, 1) addressed the same way.
#[inline]
pub fn uniform(seed: u64, path: u64, step: u64, component: u64) -> f64 {
    let key = step.wrapping_mul(0x100000001) ^ component;
    to_unit(counter_word(seed, path, key, 2)) - 1.0 / 9007199254740992.0
}
