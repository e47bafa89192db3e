//! Shared fixtures for the benchmarks.

use regalign_core::synthdata::{generate_corpus, SynthConfig};
use regalign_core::{Model, ModelConfig, Sample};

/// Seeded corpus of `samples` items and a freshly initialized model fitted to it.
pub fn fixture(samples: usize) -> (Vec<Sample>, Model) {
    let corpus = generate_corpus(&SynthConfig { samples, seed: 0, ..Default::default() }).expect("corpus");
    let cfg = ModelConfig::default().fit_corpus(&corpus).expect("config");
    let model = Model::init(cfg, 0).expect("model");
    (corpus, model)
}
