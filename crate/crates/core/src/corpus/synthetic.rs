//! Synthetic association-skewed corpus for desk-scale experiments.
//!
//! Every bias type owns two group classes (`a`, `b`) and two attribute sets
//! (`x`, `y`). Pretraining sentences pair a class-`a` group word with an
//! `x` attribute (and class `b` with `y`) with probability `skew`, and with
//! the opposite set otherwise. Attribute frequencies follow a Zipf profile,
//! so the per-instance preference margin varies and the stereotype score
//! moves gradually rather than all-or-nothing during unlearning.
//!
//! Benchmark instances reuse the vocabulary but the (group, stereotype,
//! anti-stereotype, opener, verb) tuples are disjoint across splits.

use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BiasType, ContrastPair, StereoInstance};

const OPENERS: [&str; 4] = ["the", "a", "this", "that"];
const VERBS: [&str; 4] = ["is", "was", "seems", "looks"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Probability that a pretraining sentence uses the stereotypical set.
    pub skew: f64,
    pub groups_per_class: usize,
    pub attributes_per_class: usize,
    pub unrelated_words: usize,
    pub filler_objects: usize,
    pub pretrain_sentences: usize,
    /// Fraction of pretraining sentences that are filler (object + unrelated word).
    pub filler_fraction: f64,
    pub train_per_type: usize,
    pub dev_per_type: usize,
    pub test_per_type: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            skew: 0.8,
            groups_per_class: 4,
            attributes_per_class: 6,
            unrelated_words: 12,
            filler_objects: 6,
            pretrain_sentences: 12_000,
            filler_fraction: 0.2,
            train_per_type: 150,
            dev_per_type: 200,
            test_per_type: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub pretrain: Vec<String>,
    pub train: Vec<StereoInstance>,
    pub dev: Vec<StereoInstance>,
    pub test: Vec<StereoInstance>,
}

impl SyntheticCorpus {
    /// Contrast pairs built from the test split: the full stereotypical
    /// sentence against the full anti-stereotypical one.
    pub fn contrast_pairs(&self) -> Vec<ContrastPair> {
        self.test
            .iter()
            .map(|i| ContrastPair {
                id: i.id.clone(),
                bias_type: i.bias_type,
                more_stereotypical: format!("{} {}", i.context, i.stereotype),
                less_stereotypical: format!("{} {}", i.context, i.anti_stereotype),
            })
            .collect()
    }
}

fn prefix(t: BiasType) -> &'static str {
    match t {
        BiasType::Gender => "gen",
        BiasType::Profession => "pro",
        BiasType::Race => "rac",
        BiasType::Religion => "rel",
        _ => unreachable!("synthetic corpus covers StereoSet categories only"),
    }
}

struct Vocab {
    cfg: SyntheticConfig,
}

impl Vocab {
    fn group(&self, t: BiasType, class_b: bool, k: usize) -> String {
        format!("{}_{}{k}", prefix(t), if class_b { 'b' } else { 'a' })
    }

    /// Stereotypical attribute set for class a is `x`, for class b is `y`.
    fn attribute(&self, t: BiasType, set_y: bool, k: usize) -> String {
        format!("{}_{}{k}", prefix(t), if set_y { 'y' } else { 'x' })
    }

    fn unrelated(&self, k: usize) -> String {
        format!("u{k}")
    }

    fn object(&self, k: usize) -> String {
        format!("obj{k}")
    }

    fn zipf(&self) -> WeightedIndex<f64> {
        WeightedIndex::new((0..self.cfg.attributes_per_class).map(|i| 1.0 / (i as f64 + 1.0)))
            .expect("non-empty attribute set")
    }
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticCorpus {
    let vocab = Vocab { cfg: cfg.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let zipf = vocab.zipf();

    let mut pretrain = Vec::with_capacity(cfg.pretrain_sentences);
    for _ in 0..cfg.pretrain_sentences {
        let opener = OPENERS.choose(&mut rng).unwrap();
        let verb = VERBS.choose(&mut rng).unwrap();
        if rng.gen_bool(cfg.filler_fraction) {
            let obj = vocab.object(rng.gen_range(0..cfg.filler_objects));
            let u = vocab.unrelated(rng.gen_range(0..cfg.unrelated_words));
            pretrain.push(format!("{opener} {obj} {verb} {u} ."));
            continue;
        }
        let t = *BiasType::STEREOSET.choose(&mut rng).unwrap();
        let class_b = rng.gen_bool(0.5);
        let group = vocab.group(t, class_b, rng.gen_range(0..cfg.groups_per_class));
        let stereo = rng.gen_bool(cfg.skew);
        let set_y = class_b == stereo;
        let attr = vocab.attribute(t, set_y, zipf.sample(&mut rng));
        pretrain.push(format!("{opener} {group} {verb} {attr} ."));
    }

    let mut used = HashSet::new();
    let mut draw = |split: &str, per_type: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::new();
        for t in BiasType::STEREOSET {
            let mut k = 0;
            while k < per_type {
                let class_b = rng.gen_bool(0.5);
                let g = rng.gen_range(0..cfg.groups_per_class);
                let s = rng.gen_range(0..cfg.attributes_per_class);
                let a = rng.gen_range(0..cfg.attributes_per_class);
                let o = rng.gen_range(0..OPENERS.len());
                let v = rng.gen_range(0..VERBS.len());
                if !used.insert((t, class_b, g, s, a, o, v)) {
                    continue;
                }
                let u = rng.gen_range(0..cfg.unrelated_words);
                out.push(StereoInstance {
                    id: format!("{}-{split}-{k}", t.as_str()),
                    bias_type: t,
                    context: format!("{} {} {}", OPENERS[o], vocab.group(t, class_b, g), VERBS[v]),
                    stereotype: format!("{} .", vocab.attribute(t, class_b, s)),
                    anti_stereotype: format!("{} .", vocab.attribute(t, !class_b, a)),
                    unrelated: format!("{} .", vocab.unrelated(u)),
                });
                k += 1;
            }
        }
        out
    };
    let train = draw("train", cfg.train_per_type, &mut rng);
    let dev = draw("dev", cfg.dev_per_type, &mut rng);
    let test = draw("test", cfg.test_per_type, &mut rng);
    SyntheticCorpus {
        pretrain,
        train,
        dev,
        test,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::stereoset_counts;

    #[test]
    fn sizes_and_disjoint_splits() {
        let cfg = SyntheticConfig {
            pretrain_sentences: 100,
            ..Default::default()
        };
        let c = generate(&cfg);
        assert_eq!(c.pretrain.len(), 100);
        assert_eq!(c.train.len(), 4 * cfg.train_per_type);
        assert_eq!(stereoset_counts(&c.dev)[&BiasType::Religion], cfg.dev_per_type);
        let key = |i: &StereoInstance| (i.context.clone(), i.stereotype.clone(), i.anti_stereotype.clone());
        let train: HashSet<_> = c.train.iter().map(key).collect();
        assert!(c.test.iter().all(|i| !train.contains(&key(i))));
        assert!(c.train.iter().all(|i| i.stereotype != i.anti_stereotype));
    }

    #[test]
    fn deterministic() {
        let cfg = SyntheticConfig {
            pretrain_sentences: 50,
            ..Default::default()
        };
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.pretrain, b.pretrain);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn skew_is_visible_in_pretraining() {
        let cfg = SyntheticConfig {
            pretrain_sentences: 4000,
            ..Default::default()
        };
        let c = generate(&cfg);
        let (mut stereo, mut anti) = (0, 0);
        for s in &c.pretrain {
            let w: Vec<&str> = s.split(' ').collect();
            if w[1].starts_with("gen_a") {
                if w[3].starts_with("gen_x") {
                    stereo += 1;
                } else {
                    anti += 1;
                }
            }
        }
        let frac = stereo as f64 / (stereo + anti) as f64;
        assert!((frac - 0.8).abs() < 0.05, "{frac}");
    }
}
