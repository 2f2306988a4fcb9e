#![allow(dead_code)]

use biasunlearn::corpus::BiasType;
use biasunlearn::scoring::{AdapterConfig, ModelHandle, TokenSequence, Tokenizer};
use biasunlearn::StereoInstance;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: &str = "w0 w1 w2 w3 w4 w5 w6 w7 w8";

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Bigram stub with a random table and a random (non-zero) rank-2 adapter
/// on the table.
pub fn random_stub(rng: &mut ChaCha8Rng) -> ModelHandle {
    let tok = Tokenizer::fit([WORDS]);
    let v = tok.vocab_size();
    let table = Array2::from_shape_fn((v, v), |_| rng.gen_range(-2.0..2.0));
    let mut m = ModelHandle::bigram("stub", tok, table, 32).unwrap();
    m.attach_adapter(
        &AdapterConfig {
            rank: 2,
            alpha: 4.0,
            targets: vec!["table".into()],
        },
        rng.gen(),
    )
    .unwrap();
    for p in m.adapter_mut().unwrap().pairs.values_mut() {
        p.b.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    }
    m
}

pub fn random_seq(rng: &mut ChaCha8Rng, vocab: usize) -> TokenSequence {
    let prompt_len = rng.gen_range(1..4);
    let len = prompt_len + rng.gen_range(1..5);
    let mut ids = vec![0u32];
    ids.extend((1..len).map(|_| rng.gen_range(1..vocab as u32)));
    TokenSequence { ids, prompt_len }
}

/// Effective bigram table `W + (alpha/rank) B A`, computed by explicit loops.
pub fn effective_table(m: &ModelHandle, use_adapter: bool) -> Vec<Vec<f64>> {
    let w = &m.base_params()["table"];
    let v = w.nrows();
    let mut out = vec![vec![0.0; v]; v];
    for i in 0..v {
        for j in 0..v {
            out[i][j] = w[[i, j]];
        }
    }
    if use_adapter {
        let ad = m.adapter().unwrap();
        let p = &ad.pairs["table"];
        let s = ad.alpha / ad.rank as f64;
        for i in 0..v {
            for j in 0..v {
                let mut acc = 0.0;
                for r in 0..ad.rank {
                    acc += p.b[[i, r]] * p.a[[r, j]];
                }
                out[i][j] += s * acc;
            }
        }
    }
    out
}

/// Next-token probabilities after `prev` under a bigram table.
pub fn bigram_probs(table: &[Vec<f64>], prev: u32) -> Vec<f64> {
    let col: Vec<f64> = table.iter().map(|row| row[prev as usize]).collect();
    let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = col.iter().map(|x| (x - m).exp()).sum();
    col.iter().map(|x| (x - m).exp() / z).collect()
}

/// Per-target log-probabilities by the chain rule over the table.
pub fn bigram_target_logprobs(table: &[Vec<f64>], seq: &TokenSequence) -> Vec<f64> {
    (seq.prompt_len..seq.ids.len())
        .map(|t| bigram_probs(table, seq.ids[t - 1])[seq.ids[t] as usize].ln())
        .collect()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

pub fn instance(t: BiasType, k: usize) -> StereoInstance {
    StereoInstance {
        id: format!("{}-{k}", t.as_str()),
        bias_type: t,
        context: format!("ctx{k} {}", t.as_str()),
        stereotype: format!("s{k} ."),
        anti_stereotype: format!("a{k} ."),
        unrelated: format!("u{k} ."),
    }
}

/// Eight instances for each StereoSet type.
pub fn toy_instances() -> Vec<StereoInstance> {
    BiasType::STEREOSET
        .iter()
        .flat_map(|t| (0..8).map(move |k| instance(*t, k)))
        .collect()
}

pub fn vocab_stub(instances: &[StereoInstance]) -> ModelHandle {
    let mut texts = Vec::new();
    for i in instances {
        texts.extend([
            i.context.clone(),
            i.stereotype.clone(),
            i.anti_stereotype.clone(),
            i.unrelated.clone(),
        ]);
    }
    let tok = Tokenizer::fit(texts.iter().map(String::as_str));
    ModelHandle::uniform_bigram("stub", tok, 32)
}
