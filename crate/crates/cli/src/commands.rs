use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use biasunlearn::corpus::synthetic::{generate, SyntheticConfig};
use biasunlearn::corpus::{write_crows_pairs, write_stereoset, Split};
use biasunlearn::scoring::tokenizer::split_words;
use biasunlearn::scoring::CHECKPOINT_MANIFEST;
use biasunlearn::trainer::{log_to_jsonl, pretrain as pretrain_model, PretrainConfig, StereoSetProbe, Trainer};
use biasunlearn::{
    crows_pairs_eval, import_adapter, load_crows_pairs, load_stereoset, stereoset_eval, AdapterCheckpoint,
    ModelHandle, PreferenceRule, Tokenizer,
};

use crate::config::{require_dataset, Backend, RunConfig};
use crate::{Benchmark, UsageError};

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Every StereoSet split file reachable from `path` (all three splits for a
/// directory, the file itself otherwise).
fn stereoset_files(path: &Path) -> Vec<PathBuf> {
    if path.is_dir() {
        [Split::Train, Split::Dev, Split::Test]
            .iter()
            .map(|s| path.join(s.file_name()))
            .filter(|p| p.exists())
            .collect()
    } else {
        vec![path.to_path_buf()]
    }
}

fn collect_words(words: &mut BTreeSet<String>, path: &Path) -> Result<()> {
    for file in stereoset_files(path) {
        for inst in load_stereoset(&file, Split::Train)? {
            for text in [&inst.context, &inst.stereotype, &inst.anti_stereotype, &inst.unrelated] {
                words.extend(split_words(text));
            }
        }
    }
    Ok(())
}

/// Uniform bigram over the sorted vocabulary of every dataset the config
/// names, so train and eval runs on one config agree on shapes.
fn stub_model(cfg: &RunConfig) -> Result<ModelHandle> {
    let mut words = BTreeSet::new();
    for p in [&cfg.train.dataset, &cfg.train.dev_dataset, &cfg.eval.dataset]
        .into_iter()
        .flatten()
        .filter(|p| p.exists())
    {
        collect_words(&mut words, p)?;
    }
    if let Some(p) = cfg.eval.crows_pairs.as_ref().filter(|p| p.exists()) {
        for pair in load_crows_pairs(p)? {
            words.extend(split_words(&pair.more_stereotypical));
            words.extend(split_words(&pair.less_stereotypical));
        }
    }
    if words.is_empty() {
        bail!(UsageError("stub backend needs at least one dataset to build its vocabulary".into()));
    }
    let tok = Tokenizer::fit(words.iter().map(String::as_str));
    Ok(ModelHandle::uniform_bigram(cfg.model.id.clone(), tok, cfg.model.max_len))
}

fn load_model(cfg: &RunConfig) -> Result<ModelHandle> {
    match cfg.model.backend {
        Backend::Stub => stub_model(cfg),
        Backend::Dir => {
            let path = cfg
                .model
                .path
                .as_ref()
                .ok_or_else(|| UsageError("model.path is not set".into()))?;
            if !path.exists() {
                bail!(UsageError(format!("model path not found: {}", path.display())));
            }
            Ok(ModelHandle::load(path)?)
        }
    }
}

/// Accepts an adapter directory or a training checkpoint holding `adapter/`.
fn load_adapter(path: &Path) -> Result<AdapterCheckpoint> {
    if !path.exists() {
        bail!(UsageError(format!("adapter path not found: {}", path.display())));
    }
    let nested = path.join("adapter");
    let dir = if !path.join(CHECKPOINT_MANIFEST).exists() && nested.join(CHECKPOINT_MANIFEST).exists() {
        nested
    } else {
        path.to_path_buf()
    };
    Ok(AdapterCheckpoint::load(&dir)?)
}

pub fn train(config: &Path) -> Result<()> {
    let cfg = RunConfig::load(Some(config))?;
    let dataset = require_dataset(&cfg.train.dataset, "train.dataset")?;
    let dev_path = match &cfg.train.dev_dataset {
        Some(_) => require_dataset(&cfg.train.dev_dataset, "train.dev_dataset")?,
        None => dataset,
    };
    let train_set = load_stereoset(dataset, Split::Train)?;
    let dev_set = load_stereoset(dev_path, Split::Dev)?;
    let covered: BTreeSet<_> = dev_set.iter().map(|i| i.bias_type).collect();
    if let Some(t) = train_set.iter().map(|i| i.bias_type).find(|t| !covered.contains(t)) {
        bail!(UsageError(format!("dev set has no instances of bias type {t}")));
    }

    let model = load_model(&cfg)?;
    let out = &cfg.train.output_dir;
    let mut training = cfg.train.training.clone();
    if training.checkpoint_dir.is_none() {
        training.checkpoint_dir = Some(out.join("checkpoint"));
    }
    let rule = PreferenceRule {
        tie_credit: training.tie_credit,
    };
    let mut probe = StereoSetProbe { dev: dev_set, rule };
    let mut trainer = Trainer::new(model, train_set, training)?;
    let result = trainer.run(&mut probe);
    write_file(&out.join("train_log.jsonl"), log_to_jsonl(trainer.log()))?;
    result?;

    let state = trainer.state();
    let report = stereoset_eval(trainer.model(), &probe.dev, &rule)?;
    let mut report = report;
    report.step = state.step;
    write_file(&out.join("dev_report.json"), serde_json::to_string_pretty(&report)?)?;
    write_file(&out.join("dev_report.txt"), report.to_table())?;
    write_file(&out.join("train_state.json"), serde_json::to_string_pretty(state)?)?;
    println!(
        "stopped at step {} ({})",
        state.step,
        serde_json::to_value(state.stop_reason)?.as_str().unwrap_or("unknown")
    );
    print!("{}", report.to_table());
    Ok(())
}

pub fn eval(
    config: &Path,
    benchmark: Benchmark,
    adapter: Option<&Path>,
    split: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = RunConfig::load(Some(config))?;
    if let Some(s) = split {
        cfg.eval.split = s.parse().map_err(UsageError)?;
    }
    let mut model = load_model(&cfg)?;
    if let Some(path) = adapter {
        model = import_adapter(&model, &load_adapter(path)?, false)?;
    }
    let rule = PreferenceRule {
        tie_credit: cfg.eval.tie_credit,
    };
    let (table, json) = match benchmark {
        Benchmark::Stereoset => {
            let path = require_dataset(&cfg.eval.dataset, "eval.dataset")?;
            let report = stereoset_eval(&model, &load_stereoset(path, cfg.eval.split)?, &rule)?;
            (report.to_table(), serde_json::to_string_pretty(&report)?)
        }
        Benchmark::Crowspairs => {
            let path = require_dataset(&cfg.eval.crows_pairs, "eval.crows_pairs")?;
            let report = crows_pairs_eval(&model, &load_crows_pairs(path)?, &rule)?;
            (report.to_table(), serde_json::to_string_pretty(&report)?)
        }
    };
    print!("{table}");
    if let Some(path) = out.map(Path::to_path_buf).or(cfg.eval.output.clone()) {
        write_file(&path, json)?;
    }
    Ok(())
}

pub fn transfer(adapter: &Path, target: &Path, strict_base: bool, out: &Path) -> Result<()> {
    let ckpt = load_adapter(adapter)?;
    if !target.exists() {
        bail!(UsageError(format!("target model not found: {}", target.display())));
    }
    let target = ModelHandle::load(target)?;
    let model = import_adapter(&target, &ckpt, strict_base)?;
    let mut exported = biasunlearn::export_adapter(&model)?;
    let mut metadata = ckpt.metadata.clone();
    if metadata.lineage.is_empty() {
        metadata.lineage.push(ckpt.base_id.clone());
    }
    if metadata.lineage.last().map(String::as_str) != Some(model.base_id()) {
        metadata.lineage.push(model.base_id().to_string());
    }
    exported.metadata = metadata;
    exported.save(out)?;
    println!(
        "transferred adapter from {} to {} (lineage: {})",
        ckpt.base_id,
        model.base_id(),
        exported.metadata.lineage.join(" -> ")
    );
    Ok(())
}

pub fn synth(out: &Path, cfg: &SyntheticConfig) -> Result<()> {
    if !(0.0..=1.0).contains(&cfg.skew) {
        bail!(UsageError("skew must lie in [0, 1]".into()));
    }
    let corpus = generate(cfg);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_stereoset(&out.join(Split::Train.file_name()), &corpus.train)?;
    write_stereoset(&out.join(Split::Dev.file_name()), &corpus.dev)?;
    write_stereoset(&out.join(Split::Test.file_name()), &corpus.test)?;
    write_crows_pairs(&out.join("crows_pairs.jsonl"), &corpus.contrast_pairs())?;
    let mut text = corpus.pretrain.join("\n");
    text.push('\n');
    write_file(&out.join("pretrain.txt"), text)?;
    println!(
        "wrote {} train / {} dev / {} test instances and {} pretraining sentences to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        corpus.pretrain.len(),
        out.display()
    );
    Ok(())
}

pub fn pretrain(
    corpus: &Path,
    out: &Path,
    id: &str,
    vocab_from: &[PathBuf],
    (dim, hidden, max_len): (usize, usize, usize),
    cfg: &PretrainConfig,
) -> Result<()> {
    if !corpus.exists() {
        bail!(UsageError(format!("dataset path not found: {}", corpus.display())));
    }
    let text = fs::read_to_string(corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let sentences: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let mut extra = BTreeSet::new();
    for p in vocab_from {
        if !p.exists() {
            bail!(UsageError(format!("dataset path not found: {}", p.display())));
        }
        collect_words(&mut extra, p)?;
    }
    let tok = Tokenizer::fit(
        sentences
            .iter()
            .map(String::as_str)
            .chain(extra.iter().map(String::as_str)),
    );
    let mut model = ModelHandle::tiny(id, tok, dim, hidden, max_len, cfg.seed);
    let losses = pretrain_model(&mut model, &sentences, cfg)?;
    model.save(out)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("pretrained {id}: loss {first:.4} -> {last:.4} over {} steps", losses.len());
    }
    Ok(())
}

pub fn init_model(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(Some(config))?;
    let model = load_model(&cfg)?;
    model.save(out)?;
    println!("wrote {} ({} tokens) to {}", model.base_id(), model.vocab_size(), out.display());
    Ok(())
}

pub fn perturb(model: &Path, out: &Path, id: &str, scale: f64, seed: u64) -> Result<()> {
    if !model.exists() {
        bail!(UsageError(format!("model path not found: {}", model.display())));
    }
    if !(scale.is_finite() && scale >= 0.0) {
        bail!(UsageError("scale must be a non-negative number".into()));
    }
    let sibling = ModelHandle::load(model)?.perturbed_sibling(id, scale, seed);
    sibling.save(out)?;
    println!("wrote {id} to {}", out.display());
    Ok(())
}
