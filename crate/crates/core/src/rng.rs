//! Seed derivation.
//!
//! Every random choice in the library flows from a single experiment seed.
//! Components draw from sub-seeds derived with a splitmix64 mix so that, for
//! example, changing the data shuffle cannot perturb weight initialization.
//! Random pruning uses a counter-based generator keyed on (seed, group index):
//! the mask for a group is a pure function of those two values, independent
//! of how many groups were pruned before it.

/// Seed domain for weight initialization.
pub const DOMAIN_INIT: u64 = 0x01;
/// Seed domain for per-epoch data shuffling.
pub const DOMAIN_SHUFFLE: u64 = 0x02;
/// Seed domain for random pruning masks.
pub const DOMAIN_PRUNE: u64 = 0x03;
/// Seed domain for synthetic data generation.
pub const DOMAIN_SYNTH: u64 = 0x04;
/// Seed domain for profiler inputs.
pub const DOMAIN_PROFILE: u64 = 0x05;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes two words into one, asymmetrically: `mix(a, b) != mix(b, a)` in
/// general, so (seed, domain) and (domain, seed) do not collide.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut state = a ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    splitmix64(&mut state)
}

/// Derives the sub-seed for one component of an experiment.
pub fn derive_seed(seed: u64, domain: u64) -> u64 {
    mix(seed, domain)
}

/// Small non-cryptographic generator: a splitmix64 stream whose starting
/// state is keyed on (seed, key). Used where random draws must be a pure
/// function of their position (pruning group masks) rather than of a shared
/// mutable stream.
#[derive(Debug, Clone)]
pub struct CounterRng {
    state: u64,
}

impl CounterRng {
    pub fn keyed(seed: u64, key: u64) -> Self {
        CounterRng {
            state: mix(seed, key),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform draw in `[0, bound)` by rejection, free of modulo bias.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let zone = u64::MAX - u64::MAX % bound;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }
}
