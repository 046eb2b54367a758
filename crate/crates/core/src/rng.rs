//! Seeded random streams. A master seed is split into independent
//! sub-streams addressed by a path of counters, so adding new work never
//! perturbs the randomness of existing work.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SamplerRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> SamplerRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives the stream for `(master, path[0], path[1], ...)`.
pub fn substream(master: u64, path: &[u64]) -> SamplerRng {
    let mut h = splitmix64(master);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    let mut seed = [0u8; 32];
    let mut s = h;
    for chunk in seed.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Standard Gumbel(0, 1) variate by inversion.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // open interval (0, 1) keeps both logs finite
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Draws an index from unnormalized nonnegative weights.
pub fn categorical<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // rounding fell off the end: last index with positive weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}
