//! Combined loss over one data chunk and its gradient with respect to the
//! adapter (or, for pretraining, the base weights).

use ndarray::{Array2, Axis};

use crate::corpus::{DataChunk, Passage};
use crate::error::Result;
use crate::objectives::{
    kl_position, kl_position_logit_grad, npo_forget_grad, npo_forget_loss, retention_grad,
    retention_loss, total_loss, LossBreakdown, LossWeights,
};
use crate::scoring::{score_forward, Gradients, ModelHandle, ScoredForward, TokenSequence, Weights};

#[derive(Debug, Clone)]
pub struct TokenizedChunk {
    pub forget: Vec<TokenSequence>,
    pub retain: Vec<TokenSequence>,
    pub unrelated: Vec<TokenSequence>,
}

fn tokenize_all<'a, I>(model: &ModelHandle, items: I) -> Result<Vec<TokenSequence>>
where
    I: IntoIterator<Item = &'a Passage>,
{
    items
        .into_iter()
        .map(|p| model.tokenizer().tokenize(&p.text, &p.context))
        .collect()
}

impl TokenizedChunk {
    pub fn new(model: &ModelHandle, chunk: &DataChunk) -> Result<Self> {
        Ok(Self {
            forget: tokenize_all(model, chunk.forget_batch.iter().map(|m| &m.passage))?,
            retain: tokenize_all(model, &chunk.retain_batch)?,
            unrelated: tokenize_all(model, &chunk.unrelated_batch)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ChunkEval {
    pub loss: LossBreakdown,
    pub grads: Gradients,
    /// Reference probabilities that hit the KL floor.
    pub kl_clamped: usize,
}

/// Writes `coef * weight_i * (onehot(y_i) - p_i)` into the target rows,
/// i.e. the logit gradient of `coef * Σ_i weight_i * log p_i(y_i)`.
fn logprob_grad(sf: &ScoredForward, token_weights: &[f64], coef: f64) -> Array2<f64> {
    let mut d = Array2::zeros(sf.forward.logits.raw_dim());
    let start = sf.seq.prompt_len - 1;
    for (i, (&y, &w)) in sf.seq.targets().iter().zip(token_weights).enumerate() {
        let mut row = d.row_mut(start + i);
        let lp = sf.log_probs.row(i);
        row.zip_mut_with(&lp, |g, &l| *g = -coef * w * l.exp());
        row[y as usize] += coef * w;
    }
    d
}

fn score_all(weights: &Weights<'_>, seqs: &[TokenSequence]) -> Result<Vec<ScoredForward>> {
    seqs.iter().map(|s| score_forward(weights, s)).collect()
}

/// Loss and gradients for the adapter-enabled model on one chunk.
///
/// The forget term uses summed sequence log-probs against the
/// adapter-disabled reference; retention is token-mean CE; the KL term is
/// averaged over every target position of the unrelated batch.
pub fn chunk_objective(
    model: &ModelHandle,
    chunk: &TokenizedChunk,
    weights: &LossWeights,
    grads: Gradients,
) -> Result<ChunkEval> {
    let theta = model.weights(true);
    let reference = model.weights(false);
    let mut grads = grads;

    let f_theta = score_all(&theta, &chunk.forget)?;
    let f_ref: Vec<_> = chunk
        .forget
        .iter()
        .map(|s| score_forward(&reference, s).map(|sf| sf.score))
        .collect::<Result<_>>()?;
    let f_scores: Vec<_> = f_theta.iter().map(|s| s.score.clone()).collect();
    let forget = npo_forget_loss(&f_scores, &f_ref, weights.beta)?;
    if weights.alpha_forget > 0.0 {
        let g = npo_forget_grad(&f_scores, &f_ref, weights.beta)?;
        for (sf, gi) in f_theta.iter().zip(g) {
            let w = vec![gi; sf.score.len()];
            // every target token shares dL/dsum
            let d = logprob_grad(sf, &w, weights.alpha_forget);
            theta.backward(&sf.forward, &d, &mut grads);
        }
    }

    let r_theta = score_all(&theta, &chunk.retain)?;
    let r_scores: Vec<_> = r_theta.iter().map(|s| s.score.clone()).collect();
    let retention = retention_loss(&r_scores)?;
    if weights.alpha_retention > 0.0 {
        for (sf, w) in r_theta.iter().zip(retention_grad(&r_scores)?) {
            let d = logprob_grad(sf, &w, weights.alpha_retention);
            theta.backward(&sf.forward, &d, &mut grads);
        }
    }

    let u_theta = score_all(&theta, &chunk.unrelated)?;
    let u_ref = score_all(&reference, &chunk.unrelated)?;
    let positions: usize = u_theta.iter().map(|s| s.score.len()).sum();
    let mut kl_sum = 0.0;
    let mut kl_clamped = 0;
    for (t, r) in u_theta.iter().zip(&u_ref) {
        for (lp, lq) in t.log_probs.axis_iter(Axis(0)).zip(r.log_probs.axis_iter(Axis(0))) {
            let (kl, c) = kl_position(lp, lq);
            kl_sum += kl;
            kl_clamped += c;
        }
    }
    let kl = kl_sum / positions as f64;
    if weights.alpha_kl > 0.0 {
        let coef = weights.alpha_kl / positions as f64;
        for (t, r) in u_theta.iter().zip(&u_ref) {
            let mut d = Array2::zeros(t.forward.logits.raw_dim());
            let start = t.seq.prompt_len - 1;
            for (i, (lp, lq)) in t
                .log_probs
                .axis_iter(Axis(0))
                .zip(r.log_probs.axis_iter(Axis(0)))
                .enumerate()
            {
                d.row_mut(start + i).assign(&(kl_position_logit_grad(lp, lq) * coef));
            }
            theta.backward(&t.forward, &d, &mut grads);
        }
    }

    Ok(ChunkEval {
        loss: total_loss(forget, retention, kl, weights)?,
        grads,
        kl_clamped,
    })
}

/// Token-mean cross-entropy over a batch under the given weights, with
/// gradients accumulated into `grads`. Used for base-model pretraining.
pub fn cross_entropy_objective(
    weights: &Weights<'_>,
    batch: &[TokenSequence],
    grads: &mut Gradients,
) -> Result<f64> {
    let scored = score_all(weights, batch)?;
    let scores: Vec<_> = scored.iter().map(|s| s.score.clone()).collect();
    let loss = retention_loss(&scores)?;
    for (sf, w) in scored.iter().zip(retention_grad(&scores)?) {
        let d = logprob_grad(sf, &w, 1.0);
        weights.backward(&sf.forward, &d, grads);
    }
    Ok(loss)
}
