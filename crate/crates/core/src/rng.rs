//! Reproducible random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed and selected by a
//! 64-bit stream index, so chain `i` of a run seeded with `s` draws the same
//! numbers on every platform and regardless of how chains are scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type LabRng = ChaCha8Rng;

pub fn stream(seed: u64, index: u64) -> LabRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

pub fn from_seed(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a child seed from a parent generator.
pub fn split(rng: &mut LabRng) -> u64 {
    rng.gen()
}

pub fn normal(rng: &mut LabRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn fill_normal(rng: &mut LabRng, out: &mut [f64]) {
    for x in out.iter_mut() {
        *x = rng.sample(StandardNormal);
    }
}

pub fn normal_vec(rng: &mut LabRng, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    fill_normal(rng, &mut v);
    v
}

pub fn uniform_index(rng: &mut LabRng, n: usize) -> usize {
    rng.gen_range(0..n)
}

/// `k` distinct indices drawn from `0..n`, in draw order.
pub fn choose_distinct(rng: &mut LabRng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot choose {k} of {n}");
    rand::seq::index::sample(rng, n, k).into_vec()
}
