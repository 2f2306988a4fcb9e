//! Causal-LM scoring: tokenization, per-token log-probabilities under the
//! adapted (`use_adapter = true`) or reference (`false`) model, next-token
//! distributions, and adapter checkpoints.

mod checkpoint;
mod model;
mod store;
pub mod tokenizer;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{
    export_adapter, import_adapter, AdapterCheckpoint, AdapterMetadata, CHECKPOINT_MANIFEST,
};
pub use model::{
    log_softmax_rows, snap_f32, Adapter, AdapterConfig, Architecture, Forward, Gradients, LoraPair,
    ModelHandle, ParamStore, Weights, BIGRAM_LINEAR, TINY_LINEAR,
};
pub use store::{read_f32_blob, write_f32_blob, MODEL_MANIFEST};
pub use tokenizer::Tokenizer;

/// Token ids with the leading prompt (BOS + context) marked off.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub prompt_len: usize,
}

impl TokenSequence {
    pub fn targets(&self) -> &[u32] {
        &self.ids[self.prompt_len..]
    }

    /// Logit rows whose predictions are scored: row `prompt_len - 1 + i`
    /// predicts target `i`.
    pub fn target_positions(&self) -> std::ops::Range<usize> {
        self.prompt_len - 1..self.ids.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 || self.prompt_len >= self.ids.len() {
            return Err(Error::Tokenize(format!(
                "prompt_len {} must lie in [1, {})",
                self.prompt_len,
                self.ids.len()
            )));
        }
        Ok(())
    }
}

/// Natural-log probabilities of each target token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub token_logprobs: Vec<f64>,
    pub sum: f64,
    pub mean: f64,
}

impl SequenceScore {
    pub fn new(token_logprobs: Vec<f64>) -> Self {
        let sum: f64 = token_logprobs.iter().sum();
        let mean = sum / token_logprobs.len().max(1) as f64;
        Self {
            token_logprobs,
            sum,
            mean,
        }
    }

    pub fn len(&self) -> usize {
        self.token_logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_logprobs.is_empty()
    }
}

/// Log-probabilities over the vocabulary at one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabDistribution {
    pub log_probs: Vec<f64>,
}

impl VocabDistribution {
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|v| v.exp()).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.log_probs.iter().map(|v| v.exp()).sum()
    }
}

/// A scored sequence together with its forward activations and the
/// log-softmax of its target rows, for use by the trainer.
pub struct ScoredForward {
    pub seq: TokenSequence,
    pub forward: Forward,
    /// Log-softmax over the vocabulary at each target position.
    pub log_probs: Array2<f64>,
    pub score: SequenceScore,
}

impl ScoredForward {
    pub fn distributions(&self) -> Vec<VocabDistribution> {
        self.log_probs
            .rows()
            .into_iter()
            .map(|r| VocabDistribution {
                log_probs: r.to_vec(),
            })
            .collect()
    }
}

pub fn score_forward(weights: &Weights<'_>, seq: &TokenSequence) -> Result<ScoredForward> {
    seq.validate()?;
    let forward = weights.forward(&seq.ids)?;
    let rows = seq.target_positions();
    let log_probs = log_softmax_rows(&forward.logits.slice(ndarray::s![rows, ..]).to_owned());
    let token_logprobs = seq
        .targets()
        .iter()
        .enumerate()
        .map(|(i, &y)| log_probs[[i, y as usize]])
        .collect();
    Ok(ScoredForward {
        seq: seq.clone(),
        forward,
        log_probs,
        score: SequenceScore::new(token_logprobs),
    })
}

pub fn tokenize(model: &ModelHandle, text: &str, context: &str) -> Result<TokenSequence> {
    model.tokenizer().tokenize(text, context)
}

/// `log P(ids[prompt_len + i] | ids[..prompt_len + i])` for every target.
pub fn sequence_logprob(model: &ModelHandle, seq: &TokenSequence, use_adapter: bool) -> Result<SequenceScore> {
    Ok(score_forward(&model.weights(use_adapter), seq)?.score)
}

/// Full next-token distributions at every target position.
pub fn next_token_distributions(
    model: &ModelHandle,
    seq: &TokenSequence,
    use_adapter: bool,
) -> Result<Vec<VocabDistribution>> {
    Ok(score_forward(&model.weights(use_adapter), seq)?.distributions())
}

/// Scores `context ++ text` in one call.
pub fn score_text(model: &ModelHandle, text: &str, context: &str, use_adapter: bool) -> Result<SequenceScore> {
    sequence_logprob(model, &tokenize(model, text, context)?, use_adapter)
}
