//! Shared fixtures for the benchmarks: a synthetic corpus and an untrained
//! tiny model with an adapter attached.

use biasunlearn::corpus::synthetic::{generate, SyntheticConfig, SyntheticCorpus};
use biasunlearn::{ModelHandle, Tokenizer, TrainingConfig};

pub fn corpus() -> SyntheticCorpus {
    generate(&SyntheticConfig {
        train_per_type: 60,
        dev_per_type: 50,
        test_per_type: 50,
        pretrain_sentences: 500,
        ..Default::default()
    })
}

/// Tiny model sized like the end-to-end runs, adapter on the default targets.
pub fn tiny_model(corpus: &SyntheticCorpus) -> ModelHandle {
    let tok = Tokenizer::fit(corpus.pretrain.iter().map(String::as_str));
    let mut model = ModelHandle::tiny("bench-base", tok, 32, 64, 16, 1);
    let cfg = TrainingConfig::default().adapter_config(&model);
    model.attach_adapter(&cfg, 2).expect("adapter attaches");
    model
}
