//! Small shared helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Round half away from zero for nonnegative inputs.
///
/// Used for sample counts: `round_half_up(0.5 * 165) == 83`. Documented as
/// the rounding rule for corruption selection and dataset splitting.
pub fn round_half_up(x: f64) -> usize {
    debug_assert!(x >= 0.0);
    (x + 0.5).floor() as usize
}

/// Deterministic RNG from a bare seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic RNG for one (seed, stream) pair. Distinct streams are
/// independent, which is how per-epoch shuffles stay pure functions of
/// `(seed, epoch)`.
pub fn rng_for_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
