//! Full-parameter cross-entropy training of a base model on raw sentences.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cross_entropy_objective, linear_lr, AdamW};
use crate::error::{Error, Result};
use crate::scoring::{snap_f32, Gradients, ModelHandle, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Trains every base weight of `model` and returns the per-step losses.
/// Any adapter on the model is ignored.
pub fn pretrain(model: &mut ModelHandle, sentences: &[String], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if sentences.is_empty() {
        return Err(Error::EmptyBatch("pretraining corpus"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let seqs: Vec<TokenSequence> = sentences
        .iter()
        .map(|s| model.tokenizer().tokenize(s, ""))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.steps as usize);

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(seqs[order[cursor]].clone());
            cursor += 1;
        }
        let mut grads = Gradients::for_base(model);
        let loss = cross_entropy_objective(&model.weights(false), &batch, &mut grads)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss {loss} at step {step}")));
        }
        losses.push(loss);
        let lr = linear_lr(cfg.learning_rate, step, cfg.steps);
        let grads = grads.base.expect("base gradients");
        opt.tick();
        for (name, p) in model.base_params_mut().iter_mut() {
            opt.update(name, p, &grads[name], lr);
            snap_f32(p);
        }
    }
    Ok(losses)
}
