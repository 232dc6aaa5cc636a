//! Deterministic seed derivation.
//!
//! Every stochastic component draws from its own ChaCha stream, keyed by a
//! base seed, a stream tag, and an index. Streams never interleave, so any
//! subset of jobs can run in any order (or in parallel) without changing
//! results.

/// Stream tags. Values are arbitrary but fixed forever.
pub mod stream {
    pub const POOL_MASK: u64 = 0x01;
    pub const POOL_TRAIN: u64 = 0x02;
    pub const AUGMENT: u64 = 0x03;
    pub const PAIR_BASE: u64 = 0x04;
    pub const PAIR_TRAIN: u64 = 0x05;
    pub const BENCH_TARGET: u64 = 0x06;
    pub const BENCH_SHADOW: u64 = 0x07;
    pub const RELABEL: u64 = 0x08;
    pub const DP_NOISE: u64 = 0x09;
}

/// Mix `(base, tag, index)` into a single well-spread u64 (splitmix64 finalizer).
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
