//! Loss terms of the unlearning objective.
//!
//! * forget: negative preference optimization on the θ/reference sequence
//!   log-likelihood ratio, `-(2/β) E[ln σ(-β (log π_θ - log π_ref))]`,
//!   using summed target log-probs;
//! * retention: token-mean cross-entropy under θ, averaged over the batch;
//! * kl: forward `KL(P_θ || P_ref)` over next-token distributions, averaged
//!   over positions.
//!
//! Everything is a batch mean so the mixing weights do not depend on batch
//! size. Each term also exposes the scalar derivative the trainer chains
//! into logit gradients.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{SequenceScore, VocabDistribution};

/// Reference probabilities are floored here before taking the log ratio.
pub const KL_REF_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha_forget: f64,
    pub alpha_retention: f64,
    pub alpha_kl: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_forget: 0.4,
            alpha_retention: 0.4,
            alpha_kl: 0.2,
            beta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let a = [self.alpha_forget, self.alpha_retention, self.alpha_kl];
        if a.iter().any(|v| !v.is_finite() || *v < 0.0) || a.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with a positive sum, got {a:?}"
            )));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub forget: f64,
    pub retention: f64,
    pub kl: f64,
    pub total: f64,
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_aligned(theta: &[SequenceScore], reference: &[SequenceScore]) -> Result<()> {
    if theta.is_empty() {
        return Err(Error::EmptyBatch("forget batch"));
    }
    if theta.len() != reference.len() {
        return Err(Error::Misaligned(format!(
            "{} θ scores vs {} reference scores",
            theta.len(),
            reference.len()
        )));
    }
    for (i, (t, r)) in theta.iter().zip(reference).enumerate() {
        if t.len() != r.len() {
            return Err(Error::Misaligned(format!(
                "sequence {i}: {} θ tokens vs {} reference tokens",
                t.len(),
                r.len()
            )));
        }
    }
    Ok(())
}

/// `-(2/β) · mean ln σ(-β (sum_θ - sum_ref))`.
pub fn npo_forget_loss(theta: &[SequenceScore], reference: &[SequenceScore], beta: f64) -> Result<f64> {
    check_aligned(theta, reference)?;
    let n = theta.len() as f64;
    // -ln σ(-x) = softplus(x)
    let total: f64 = theta
        .iter()
        .zip(reference)
        .map(|(t, r)| softplus(beta * (t.sum - r.sum)))
        .sum();
    Ok(2.0 / beta * total / n)
}

/// `dL_forget / d sum_θ` for each sequence: `(2/N) σ(β (sum_θ - sum_ref))`.
pub fn npo_forget_grad(theta: &[SequenceScore], reference: &[SequenceScore], beta: f64) -> Result<Vec<f64>> {
    check_aligned(theta, reference)?;
    let n = theta.len() as f64;
    Ok(theta
        .iter()
        .zip(reference)
        .map(|(t, r)| 2.0 / n * sigmoid(beta * (t.sum - r.sum)))
        .collect())
}

/// Mean over the batch of each sequence's token-mean negative log-likelihood.
pub fn retention_loss(theta: &[SequenceScore]) -> Result<f64> {
    if theta.is_empty() {
        return Err(Error::EmptyBatch("retain batch"));
    }
    Ok(-theta.iter().map(|s| s.mean).sum::<f64>() / theta.len() as f64)
}

/// `dL_retention / d logprob` for every token of every sequence.
pub fn retention_grad(theta: &[SequenceScore]) -> Result<Vec<Vec<f64>>> {
    if theta.is_empty() {
        return Err(Error::EmptyBatch("retain batch"));
    }
    let n = theta.len() as f64;
    Ok(theta
        .iter()
        .map(|s| vec![-1.0 / (n * s.len() as f64); s.len()])
        .collect())
}

fn floored_ref(lq: f64) -> (f64, bool) {
    let floor = KL_REF_FLOOR.ln();
    if lq < floor {
        (floor, true)
    } else {
        (lq, false)
    }
}

/// `Σ_v P_θ(v) (ln P_θ(v) - ln P_ref(v))` at one position.
pub fn kl_position(theta: ArrayView1<'_, f64>, reference: ArrayView1<'_, f64>) -> (f64, usize) {
    let mut kl = 0.0;
    let mut clamped = 0;
    for (&lp, &lq) in theta.iter().zip(reference.iter()) {
        let p = lp.exp();
        if p == 0.0 {
            continue;
        }
        let (lq, c) = floored_ref(lq);
        clamped += c as usize;
        kl += p * (lp - lq);
    }
    (kl, clamped)
}

/// `d KL_position / d logits_θ`: `p_j ((ln p_j - ln q_j) - KL)`.
pub fn kl_position_logit_grad(theta: ArrayView1<'_, f64>, reference: ArrayView1<'_, f64>) -> Array1<f64> {
    let (kl, _) = kl_position(theta, reference);
    Array1::from_iter(theta.iter().zip(reference.iter()).map(|(&lp, &lq)| {
        let p = lp.exp();
        p * (lp - floored_ref(lq).0 - kl)
    }))
}

fn check_dists(theta: &[VocabDistribution], reference: &[VocabDistribution]) -> Result<()> {
    if theta.is_empty() {
        return Err(Error::EmptyBatch("unrelated batch"));
    }
    if theta.len() != reference.len() {
        return Err(Error::Misaligned(format!(
            "{} θ positions vs {} reference positions",
            theta.len(),
            reference.len()
        )));
    }
    if let Some(i) = theta
        .iter()
        .zip(reference)
        .position(|(t, r)| t.log_probs.len() != r.log_probs.len())
    {
        return Err(Error::Misaligned(format!("position {i}: vocabulary sizes differ")));
    }
    Ok(())
}

/// Mean forward KL over aligned positions, plus the number of reference
/// entries that hit the floor.
pub fn kl_unrelated_loss_with_diagnostics(
    theta: &[VocabDistribution],
    reference: &[VocabDistribution],
) -> Result<(f64, usize)> {
    check_dists(theta, reference)?;
    let mut total = 0.0;
    let mut clamped = 0;
    for (t, r) in theta.iter().zip(reference) {
        let (kl, c) = kl_position(
            ArrayView1::from(t.log_probs.as_slice()),
            ArrayView1::from(r.log_probs.as_slice()),
        );
        total += kl;
        clamped += c;
    }
    Ok((total / theta.len() as f64, clamped))
}

pub fn kl_unrelated_loss(theta: &[VocabDistribution], reference: &[VocabDistribution]) -> Result<f64> {
    Ok(kl_unrelated_loss_with_diagnostics(theta, reference)?.0)
}

/// `α1 forget + α2 retention + α3 kl`.
pub fn total_loss(forget: f64, retention: f64, kl: f64, weights: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("forget", forget), ("retention", retention), ("kl", kl)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss = {v}")));
        }
    }
    Ok(LossBreakdown {
        forget,
        retention,
        kl,
        total: weights.alpha_forget * forget + weights.alpha_retention * retention + weights.alpha_kl * kl,
    })
}
