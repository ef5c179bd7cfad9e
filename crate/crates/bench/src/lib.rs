//! Shared fixtures for the criterion benchmarks.
//!
//! Run with `cargo bench -p specdec-bench`; a single group with e.g.
//! `cargo bench -p specdec-bench --bench decoding -- chain`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specdec_core::model::{init_target, ModelConfig, TransformerWeights};

/// Seeded uniform values in `[-1, 1)`.
pub fn random_vec(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Untrained toy target with `identity_layers` zero-output blocks of width
/// `identity_ffn` appended.
pub fn toy_target(identity_layers: usize, identity_ffn: usize) -> TransformerWeights {
    let base = init_target(&ModelConfig::default()).expect("default config is valid");
    if identity_layers == 0 {
        base
    } else {
        base.with_identity_layers(identity_layers, identity_ffn).expect("identity blocks fit")
    }
}

/// Seeded prompt of `len` byte tokens.
pub fn prompt(len: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(32..127)).collect()
}
