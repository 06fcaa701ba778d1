//! Hierarchical deterministic random streams.
//!
//! A stream is identified by a root seed and a path of 64-bit labels, e.g.
//! `(seed, [EXPERIMENT, round, client, SHUFFLE])`. The path is hashed into a
//! ChaCha key, so a child stream never depends on how many values were drawn
//! from its parent and parallel clients get identical streams whatever order
//! they run in.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Well-known purpose labels for stream paths.
pub mod label {
    pub const INIT: u64 = 0x494e_4954;
    pub const DATA: u64 = 0x4441_5441;
    pub const TEST_DATA: u64 = 0x5445_5354;
    pub const PARTITION: u64 = 0x5041_5254;
    pub const ROUND: u64 = 0x524f_554e;
    pub const SAMPLE: u64 = 0x5341_4d50;
    pub const CLIENT: u64 = 0x434c_4e54;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const CURVATURE: u64 = 0x4355_5256;
    pub const PROBE: u64 = 0x5052_4f42;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_key(seed: u64, path: &[u64]) -> [u8; 32] {
    let mut state = seed ^ 0x6a09_e667_f3bc_c908;
    let mut acc = splitmix64(&mut state);
    for (depth, &l) in path.iter().enumerate() {
        state ^= l.rotate_left((depth as u32 * 7) % 64) ^ acc;
        acc = splitmix64(&mut state);
    }
    state ^= path.len() as u64;
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

/// A deterministic random stream at `(seed, path)`.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    path: Vec<u64>,
    inner: ChaCha12Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, Vec::new())
    }

    fn at(seed: u64, path: Vec<u64>) -> Self {
        let inner = ChaCha12Rng::from_seed(derive_key(seed, &path));
        Rng { seed, path, inner }
    }

    /// Independent child stream extended by `label`. Fresh regardless of the
    /// draws already taken from `self`.
    pub fn child(&self, label: u64) -> Self {
        let mut path = self.path.clone();
        path.push(label);
        Self::at(self.seed, path)
    }

    /// Child stream extended by several labels at once.
    pub fn stream(&self, labels: &[u64]) -> Self {
        let mut path = self.path.clone();
        path.extend_from_slice(labels);
        Self::at(self.seed, path)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}
