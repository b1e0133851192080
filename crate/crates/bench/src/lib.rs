// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixtures shared by the benchmarks.

use sublab_core::corpus::BOS;
use sublab_core::{ModelConfig, ParamSet, TokenStream};

/// The reduced desk model: 4 layers, width 64, vocabulary 1024.
pub fn desk_config() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        n_heads: 4,
        d_model: 64,
        d_mlp: 256,
        vocab_size: 1024,
        max_seq_len: 64,
        seed: 0,
        ..ModelConfig::default()
    }
}

pub fn desk_params() -> ParamSet<f32> {
    ParamSet::init(&desk_config()).expect("desk config is valid")
}

/// Deterministic pseudo-random token ids below `vocab`, with a document
/// boundary every 500 tokens.
pub fn token_stream(len: usize, vocab: u32) -> TokenStream {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let ids = (0..len)
        .map(|i| {
            if i % 500 == 0 {
                return BOS;
            }
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            2 + (state % (vocab as u64 - 2)) as u32
        })
        .collect();
    TokenStream {
        ids,
        sources: vec![],
        vocab_hash: String::new(),
    }
}
