//! Repo-wide seeded randomness.
//!
//! Every stochastic component draws from [`OratRng`] (ChaCha8, a counter-based
//! generator with a fixed, platform-independent output stream). Components
//! never share a stream: each derives its own seed from the run seed and a
//! purpose tag, so adding a consumer never shifts another consumer's draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type OratRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> OratRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sub-seed for `(seed, tag, index)`. FNV-1a over the tag, mixed with splitmix64.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(seed ^ h) ^ splitmix64(index.wrapping_add(h)))
}

pub fn substream(seed: u64, tag: &str, index: u64) -> OratRng {
    seeded(derive_seed(seed, tag, index))
}

/// One standard normal draw via the Box–Muller transform.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // u1 in (0, 1] keeps ln finite.
    let u1 = 1.0 - rng.gen::<f64>();
    let u2 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
