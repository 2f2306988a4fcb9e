//! Run configuration: one TOML file with `[model]`, `[train]` and `[eval]`
//! sections. Any key can be overridden from the environment as
//! `BIASUNLEARN_<SECTION>_<KEY>`; nested keys use a double underscore, e.g.
//! `BIASUNLEARN_TRAIN_WEIGHTS__BETA=0.2`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use biasunlearn::corpus::Split;
use biasunlearn::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const ENV_PREFIX: &str = "BIASUNLEARN_";
const SECTIONS: [&str; 3] = ["model", "train", "eval"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Uniform bigram model over the configured datasets' vocabulary.
    #[default]
    Stub,
    /// A model directory written by `pretrain` or `init-model`.
    Dir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backend: Backend,
    pub path: Option<PathBuf>,
    pub id: String,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backend: Backend::Stub,
            path: None,
            id: "stub".into(),
            max_len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    /// StereoSet-format training data: a split directory or a JSONL file.
    pub dataset: Option<PathBuf>,
    /// Dev data for probes; defaults to the dev split of `dataset`.
    pub dev_dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(flatten)]
    pub training: TrainingConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            dataset: None,
            dev_dataset: None,
            output_dir: PathBuf::from("runs/latest"),
            training: TrainingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub dataset: Option<PathBuf>,
    pub split: Split,
    pub crows_pairs: Option<PathBuf>,
    pub tie_credit: f64,
    pub output: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            dataset: None,
            split: Split::Test,
            crows_pairs: None,
            tie_credit: 0.5,
            output: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `BIASUNLEARN_*` overrides from `vars` onto a parsed table.
pub fn apply_env<I>(table: &mut toml::Table, vars: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    for (name, raw) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let rest = rest.to_ascii_lowercase();
        let Some((section, key)) = rest.split_once('_') else {
            continue;
        };
        if !SECTIONS.contains(&section) {
            continue;
        }
        let path: Vec<&str> = key.split("__").collect();
        let mut node = table
            .entry(section)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        for part in &path[..path.len() - 1] {
            node = node
                .as_table_mut()
                .ok_or_else(|| UsageError(format!("{name}: {section} is not a table")))?
                .entry(*part)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        node.as_table_mut()
            .ok_or_else(|| UsageError(format!("{name}: parent of {key} is not a table")))?
            .insert(path[path.len() - 1].to_string(), parse_value(&raw));
    }
    Ok(())
}

fn check_train_keys(table: &toml::Table) -> anyhow::Result<()> {
    let Some(train) = table.get("train").and_then(toml::Value::as_table) else {
        return Ok(());
    };
    let known = serde_json::to_value(TrainSection::default()).expect("train section serializes");
    let known = known.as_object().expect("train section is an object");
    for key in train.keys() {
        if !known.contains_key(key) {
            return Err(UsageError(format!("unknown field train.{key}")).into());
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, env: impl IntoIterator<Item = (String, String)>) -> anyhow::Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| UsageError(format!("invalid config: {e}")))?;
        apply_env(&mut table, env)?;
        check_train_keys(&table)?;
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e| UsageError(format!("invalid config: {e}")))?;
        cfg.train
            .training
            .validate()
            .map_err(|e| UsageError(format!("invalid config: {e}")))?;
        if !(0.0..=1.0).contains(&cfg.eval.tie_credit) {
            return Err(UsageError("invalid config: eval.tie_credit must lie in [0, 1]".into()).into());
        }
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults when `None`) and applies the
    /// process environment. Relative paths resolve against the file's
    /// directory.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Self::from_toml("", std::env::vars());
        };
        if !path.exists() {
            return Err(UsageError(format!("config file not found: {}", path.display())).into());
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text, std::env::vars())?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix_opt(&mut self.model.path);
        fix_opt(&mut self.train.dataset);
        fix_opt(&mut self.train.dev_dataset);
        fix(&mut self.train.output_dir);
        fix_opt(&mut self.train.training.checkpoint_dir);
        fix_opt(&mut self.eval.dataset);
        fix_opt(&mut self.eval.crows_pairs);
        fix_opt(&mut self.eval.output);
    }
}

/// Fails with a usage error unless `path` is set and exists.
pub fn require_dataset<'a>(path: &'a Option<PathBuf>, field: &str) -> anyhow::Result<&'a Path> {
    match path {
        None => Err(UsageError(format!("{field} is not set")).into()),
        Some(p) if !p.exists() => Err(UsageError(format!("dataset path not found: {} ({field})", p.display())).into()),
        Some(p) => Ok(p),
    }
}
