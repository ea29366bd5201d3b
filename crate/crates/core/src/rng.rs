//! Named sub-seeds derived from one top-level seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use alora_tensor::Tensor;

pub type Rng = ChaCha8Rng;

/// Splits a root seed into independent, reproducible streams keyed by name
/// (`"data"`, `"init"`, `"batches"`, `"bval"`, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn seed(&self, name: &str) -> u64 {
        splitmix64(self.root ^ fnv1a(name.as_bytes()))
    }

    pub fn rng(&self, name: &str) -> Rng {
        Rng::seed_from_u64(self.seed(name))
    }

    pub fn child(&self, name: &str) -> SeedTree {
        SeedTree::new(self.seed(name))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite positive std");
    Tensor::from_fn(rows, cols, |_, _| normal.sample(rng))
}
