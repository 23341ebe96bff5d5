//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by `(run seed, namespace, index)`, so streams never overlap and a
//! run is reproducible from its seed alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::DTensor;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn derive_seed(seed: u64, namespace: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(namespace)).wrapping_add(index))
}

pub fn stream(seed: u64, namespace: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, namespace, index))
}

pub fn uniform_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> DTensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    DTensor::new(shape.to_vec(), data).expect("finite by construction")
}

/// Draw from the open interval (0, 1).
pub fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}
