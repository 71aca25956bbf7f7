//! Derived random streams.
//!
//! Every random decision in the crate draws from a ChaCha stream keyed by a
//! master seed, a domain label and an index (utterance id, step number, ...),
//! so results never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive_seed(master: u64, domain: &str, index: u64) -> u64 {
    let h = splitmix64(master ^ fnv1a(domain));
    splitmix64(h ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn stream(master: u64, domain: &str, index: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(master, domain, index))
}
