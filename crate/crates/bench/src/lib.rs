//! Shared fixtures for the benchmarks.

use sdlm_core::corpus::TokenId;
use sdlm_core::model::{ModelConfig, ModelParameters};
use sdlm_core::rng::{self, SeededRng};
use sdlm_core::schedule::{NoiseSchedule, DEFAULT_OFFSET};
use sdlm_core::simplex::LogitBlock;

/// A denoiser at the memorization-test size: d=128, 4 layers, |V|=128.
pub fn memorization_model() -> ModelParameters {
    let cfg = ModelConfig {
        vocab_size: 128,
        max_len: 64,
        d_model: 128,
        n_layers: 4,
        n_heads: 4,
        d_ff: 256,
        one_hot_k: 5.0,
    };
    ModelParameters::init(cfg, &mut rng::seeded(0)).expect("valid fixture config")
}

pub fn schedule() -> NoiseSchedule {
    NoiseSchedule::cosine(200, DEFAULT_OFFSET).expect("valid schedule")
}

/// A context of `len` tokens and a noisy block of `rows` rows.
pub fn inputs(model: &ModelParameters, len: usize, rows: usize, rng: &mut SeededRng) -> (Vec<TokenId>, LogitBlock) {
    let v = model.config().vocab_size;
    let k = model.config().one_hot_k;
    let ctx = (0..len).map(|i| (2 + i % (v - 2)) as TokenId).collect();
    (ctx, LogitBlock::noise(rows, v, k, k, rng))
}
