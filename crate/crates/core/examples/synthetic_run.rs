//! Pretrains a tiny model on the synthetic skewed corpus, unlearns the
//! injected association and prints held-out scores before and after.
//!
//! cargo run --release -p biasunlearn-core --example synthetic_run -- [lr] [steps] [seed]

use std::time::Instant;

use biasunlearn::bias_eval::stereoset_eval_at;
use biasunlearn::corpus::synthetic::{generate, SyntheticConfig};
use biasunlearn::trainer::{pretrain, LogRecord, PretrainConfig, Trainer};
use biasunlearn::{stereoset_eval, ModelHandle, PreferenceRule, Tokenizer, TrainingConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> biasunlearn::Result<()> {
    let lr = arg(1, 5e-4);
    let steps = arg(2, 400u64);
    let seed = arg(3, 17u64);
    let started = Instant::now();

    let corpus = generate(&SyntheticConfig {
        seed,
        ..Default::default()
    });
    let tok = Tokenizer::fit(corpus.pretrain.iter().map(String::as_str));
    let mut model = ModelHandle::tiny("synthetic-base", tok, 32, 64, 16, 7);
    let losses = pretrain(&mut model, &corpus.pretrain, &PretrainConfig::default())?;
    println!(
        "pretrain loss {:.3} -> {:.3} in {:.1?}",
        losses[0],
        losses.last().unwrap(),
        started.elapsed()
    );

    let rule = PreferenceRule::default();
    let before = stereoset_eval(&model, &corpus.test, &rule)?;
    println!("before:\n{}", before.to_table());

    let cfg = TrainingConfig {
        learning_rate: lr,
        max_steps: steps,
        probe_every: 10,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, corpus.train.clone(), cfg)?;
    let mut probe = |m: &ModelHandle, step: u64| {
        let dev = stereoset_eval_at(m, &corpus.dev, &rule, step)?;
        let per_type: Vec<String> = dev.per_type.iter().map(|(t, s)| format!("{t} {:.1}", s.ss)).collect();
        println!("step {step}: dev SS {}", per_type.join(", "));
        Ok(dev)
    };
    trainer.run(&mut probe)?;
    for r in trainer.log() {
        if let LogRecord::Probe { step, swaps, .. } = r {
            for s in swaps {
                println!("step {step}: {} swapped={}", s.bias_type, s.swapped);
            }
        }
    }

    let after = stereoset_eval(trainer.model(), &corpus.test, &rule)?;
    println!("after:\n{}", after.to_table());
    println!(
        "SS {:.1} -> {:.1}, LMS {:.1} -> {:.1}, stop {:?} at step {}, {:.1?}",
        before.overall.ss,
        after.overall.ss,
        before.overall.lms,
        after.overall.lms,
        trainer.state().stop_reason,
        trainer.state().step,
        started.elapsed()
    );
    Ok(())
}
