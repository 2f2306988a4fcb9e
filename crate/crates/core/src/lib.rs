//! Debiasing causal language models by targeted unlearning.
//!
//! The crate covers the whole pipeline: bias-benchmark corpora and their
//! forget/retain partitioning ([`corpus`]), sequence scoring under an
//! adapted or reference model ([`scoring`]), the combined unlearning loss
//! ([`objectives`]), StereoSet and Crows-Pairs metrics ([`bias_eval`]) and
//! the training loop with dynamic swapping and early stop ([`trainer`]).

pub mod bias_eval;
pub mod corpus;
mod error;
pub mod objectives;
pub mod scoring;
pub mod trainer;

pub use bias_eval::{
    crows_pairs_eval, stereoset_eval, CrowsPairsReport, EvalReport, PreferenceRule, TypeScores,
};
pub use corpus::{
    load_crows_pairs, load_stereoset, BiasType, ContrastPair, PartitionState, Split, StereoInstance,
    SwapEvent,
};
pub use error::{Error, Result};
pub use objectives::{LossBreakdown, LossWeights};
pub use scoring::{
    export_adapter, import_adapter, AdapterCheckpoint, AdapterConfig, Architecture, ModelHandle,
    SequenceScore, TokenSequence, Tokenizer,
};
pub use trainer::{train, TrainState, Trainer, TrainingConfig};
