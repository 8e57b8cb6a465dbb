//! Named random streams. Each stream is seeded from the run seed, a stream
//! name and up to two indices, so drawing from one stream never shifts
//! another. That keeps the trace model, task arrivals and ground truth
//! identical across policies for a given seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Range;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn stream_seed(seed: u64, name: &str, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ fnv1a(name));
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(32))
}

pub fn stream(seed: u64, name: &str, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, name, a, b))
}

pub fn uniform(rng: &mut impl Rng, r: Range) -> f64 {
    if r.0 == r.1 {
        // still consume a draw so constant ranges keep streams aligned
        let _: f64 = rng.random();
        r.0
    } else {
        r.0 + (r.1 - r.0) * rng.random::<f64>()
    }
}

pub fn exponential(rng: &mut impl Rng, rate: f64) -> f64 {
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}
