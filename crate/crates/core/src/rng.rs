//! Deterministic pseudo-random streams (SplitMix64).
//!
//! Every stochastic component in the crate draws from an [`Rng`] derived from
//! the run seed, so a fixed seed reproduces runs bitwise on one machine. The
//! state is a single `u64`, which keeps it trivially serializable into
//! checkpoints.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: mix(seed ^ 0xA076_1D64_78BD_642F),
        }
    }

    pub fn from_state(state: u64) -> Self {
        Self { state }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    /// Independent substream; `tag` distinguishes consumers of one seed.
    pub fn derive(&self, tag: u64) -> Rng {
        Rng {
            state: mix(self.state ^ mix(tag.wrapping_mul(GAMMA) ^ 0x94D0_49BB_1331_11EB)),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n); n must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        lo + self.below(hi - lo + 1)
    }

    /// Standard normal via Box-Muller; stateless beyond the u64 counter.
    pub fn normal(&mut self) -> f64 {
        let mut u1 = self.next_f64();
        while u1 <= 0.0 {
            u1 = self.next_f64();
        }
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_scaled(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// The per-purpose streams owned by one run seed.
#[derive(Debug, Clone, Copy)]
pub struct SeedStreams {
    /// Parameter initialization.
    pub init: Rng,
    /// Synthetic data generation.
    pub data: Rng,
    /// Epoch shuffling.
    pub shuffle: Rng,
}

/// Derive every stochastic stream in the crate from one seed.
pub fn seed_all(seed: u64) -> SeedStreams {
    let root = Rng::new(seed);
    SeedStreams {
        init: root.derive(1),
        data: root.derive(2),
        shuffle: root.derive(3),
    }
}
