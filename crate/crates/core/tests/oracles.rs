//! Loss values against brute-force oracles on the bigram stub: closed-form
//! scalar NPO, chain-rule enumeration for cross-entropy and explicit
//! full-vocabulary sums for KL.

mod common;

use biasunlearn::objectives::{LossWeights, KL_REF_FLOOR};
use biasunlearn::scoring::{sequence_logprob, Gradients, TokenSequence};
use biasunlearn::trainer::{chunk_objective, TokenizedChunk};
use common::*;
use rand::Rng;

const CASES: u64 = 120;
const TOL: f64 = 1e-6;

fn batch(rng: &mut rand_chacha::ChaCha8Rng, vocab: usize) -> Vec<TokenSequence> {
    let n = rng.gen_range(1..5);
    (0..n).map(|_| random_seq(rng, vocab)).collect()
}

fn only(forget: f64, retention: f64, kl: f64, beta: f64) -> LossWeights {
    LossWeights {
        alpha_forget: forget,
        alpha_retention: retention,
        alpha_kl: kl,
        beta,
    }
}

#[test]
fn sequence_logprob_matches_enumeration() {
    let mut rng = rng(1);
    for _ in 0..CASES {
        let m = random_stub(&mut rng);
        let seq = random_seq(&mut rng, m.vocab_size());
        for use_adapter in [false, true] {
            let table = effective_table(&m, use_adapter);
            let want = bigram_target_logprobs(&table, &seq);
            let got = sequence_logprob(&m, &seq, use_adapter).unwrap();
            assert_eq!(got.len(), want.len());
            for (g, w) in got.token_logprobs.iter().zip(&want) {
                assert!(rel_close(*g, *w, TOL), "{g} vs {w}");
            }
            assert!(rel_close(got.sum, want.iter().sum(), TOL));
        }
    }
}

#[test]
fn npo_matches_closed_form() {
    let mut rng = rng(2);
    for _ in 0..CASES {
        let m = random_stub(&mut rng);
        let v = m.vocab_size();
        let beta = rng.gen_range(0.05..2.0);
        let chunk = TokenizedChunk {
            forget: batch(&mut rng, v),
            retain: batch(&mut rng, v),
            unrelated: batch(&mut rng, v),
        };
        let got = chunk_objective(&m, &chunk, &only(1.0, 0.0, 0.0, beta), Gradients::for_adapter(&m))
            .unwrap()
            .loss
            .forget;

        let theta = effective_table(&m, true);
        let reference = effective_table(&m, false);
        let mut acc = 0.0;
        for s in &chunk.forget {
            let d: f64 = bigram_target_logprobs(&theta, s).iter().sum::<f64>()
                - bigram_target_logprobs(&reference, s).iter().sum::<f64>();
            // -(2/beta) ln sigmoid(-beta d), written out directly
            acc += -(2.0 / beta) * (1.0 / (1.0 + (beta * d).exp())).ln();
        }
        let want = acc / chunk.forget.len() as f64;
        assert!(rel_close(got, want, TOL), "{got} vs {want}");
    }
}

#[test]
fn retention_matches_chain_rule() {
    let mut rng = rng(3);
    for _ in 0..CASES {
        let m = random_stub(&mut rng);
        let v = m.vocab_size();
        let chunk = TokenizedChunk {
            forget: batch(&mut rng, v),
            retain: batch(&mut rng, v),
            unrelated: batch(&mut rng, v),
        };
        let got = chunk_objective(&m, &chunk, &only(0.0, 1.0, 0.0, 0.1), Gradients::for_adapter(&m))
            .unwrap()
            .loss
            .retention;

        let theta = effective_table(&m, true);
        let mut acc = 0.0;
        for s in &chunk.retain {
            // probability of the target span, multiplied out token by token
            let mut p = 1.0;
            let mut n = 0;
            for t in s.prompt_len..s.ids.len() {
                p *= bigram_probs(&theta, s.ids[t - 1])[s.ids[t] as usize];
                n += 1;
            }
            acc += -p.ln() / n as f64;
        }
        let want = acc / chunk.retain.len() as f64;
        assert!(rel_close(got, want, TOL), "{got} vs {want}");
    }
}

#[test]
fn kl_matches_full_vocabulary_sum() {
    let mut rng = rng(4);
    for _ in 0..CASES {
        let m = random_stub(&mut rng);
        let v = m.vocab_size();
        let chunk = TokenizedChunk {
            forget: batch(&mut rng, v),
            retain: batch(&mut rng, v),
            unrelated: batch(&mut rng, v),
        };
        let got = chunk_objective(&m, &chunk, &only(0.0, 0.0, 1.0, 0.1), Gradients::for_adapter(&m))
            .unwrap()
            .loss
            .kl;

        let theta = effective_table(&m, true);
        let reference = effective_table(&m, false);
        let mut acc = 0.0;
        let mut positions = 0;
        for s in &chunk.unrelated {
            for t in s.prompt_len..s.ids.len() {
                let p = bigram_probs(&theta, s.ids[t - 1]);
                let q = bigram_probs(&reference, s.ids[t - 1]);
                for j in 0..v {
                    if p[j] > 0.0 {
                        acc += p[j] * (p[j].ln() - q[j].max(KL_REF_FLOOR).ln());
                    }
                }
                positions += 1;
            }
        }
        let want = acc / positions as f64;
        assert!(rel_close(got, want, TOL) || (got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn total_is_weighted_sum() {
    let mut rng = rng(5);
    for _ in 0..CASES {
        let m = random_stub(&mut rng);
        let v = m.vocab_size();
        let chunk = TokenizedChunk {
            forget: batch(&mut rng, v),
            retain: batch(&mut rng, v),
            unrelated: batch(&mut rng, v),
        };
        let w = only(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.01..1.0), 0.1);
        let l = chunk_objective(&m, &chunk, &w, Gradients::for_adapter(&m)).unwrap().loss;
        let want = w.alpha_forget * l.forget + w.alpha_retention * l.retention + w.alpha_kl * l.kl;
        assert!(rel_close(l.total, want, 1e-12));
    }
}
