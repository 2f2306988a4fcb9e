//! Adapter checkpoints: `manifest.json` plus `<name>.A.bin` / `<name>.B.bin`
//! float32 little-endian row-major blobs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Adapter, LoraPair, ModelHandle};
use super::store::{read_f32_blob, write_f32_blob, TensorEntry};
use crate::error::{Error, Result};
use crate::objectives::LossWeights;

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterMetadata {
    pub training_step: u64,
    pub loss_weights: Option<LossWeights>,
    /// sha256 of the JSON-encoded swap log.
    pub swap_log_digest: String,
    pub seed: u64,
    /// Base ids this adapter has been attached to, oldest first.
    #[serde(default)]
    pub lineage: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCheckpoint {
    pub base_id: String,
    pub rank: usize,
    pub alpha: f64,
    pub matrices: BTreeMap<String, LoraPair>,
    pub metadata: AdapterMetadata,
}

#[derive(Serialize, Deserialize)]
struct AdapterEntry {
    name: String,
    rows: usize,
    cols: usize,
    a: TensorEntry,
    b: TensorEntry,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    base_id: String,
    rank: usize,
    alpha: f64,
    names: Vec<String>,
    tensors: Vec<AdapterEntry>,
    metadata: AdapterMetadata,
}

pub fn export_adapter(model: &ModelHandle) -> Result<AdapterCheckpoint> {
    let adapter = model
        .adapter()
        .ok_or_else(|| Error::Checkpoint("model has no adapter to export".into()))?;
    Ok(AdapterCheckpoint {
        base_id: model.base_id().to_string(),
        rank: adapter.rank,
        alpha: adapter.alpha,
        matrices: adapter.pairs.clone(),
        metadata: AdapterMetadata {
            lineage: vec![model.base_id().to_string()],
            ..Default::default()
        },
    })
}

/// Attaches the checkpoint's deltas to a copy of `model`.
///
/// Every matrix must fit the target's base weights; with `strict_base` the
/// base ids must also agree.
pub fn import_adapter(model: &ModelHandle, ckpt: &AdapterCheckpoint, strict_base: bool) -> Result<ModelHandle> {
    if strict_base && ckpt.base_id != model.base_id() {
        return Err(Error::BaseMismatch {
            expected: ckpt.base_id.clone(),
            found: model.base_id().to_string(),
        });
    }
    let mut out = model.clone();
    out.set_adapter(Adapter {
        rank: ckpt.rank,
        alpha: ckpt.alpha,
        pairs: ckpt.matrices.clone(),
    })?;
    Ok(out)
}

fn check_f32_exact(name: &str, m: &ndarray::Array2<f64>) -> Result<()> {
    if m.iter().any(|&v| (v as f32) as f64 != v) {
        return Err(Error::Checkpoint(format!(
            "{name}: values are not representable as float32; snap the adapter before saving"
        )));
    }
    Ok(())
}

impl AdapterCheckpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::new();
        for (name, p) in &self.matrices {
            check_f32_exact(name, &p.a)?;
            check_f32_exact(name, &p.b)?;
            let (rows, cols) = p.shape();
            let a_file = format!("{name}.A.bin");
            let b_file = format!("{name}.B.bin");
            write_f32_blob(&dir.join(&a_file), &p.a)?;
            write_f32_blob(&dir.join(&b_file), &p.b)?;
            tensors.push(AdapterEntry {
                name: name.clone(),
                rows,
                cols,
                a: TensorEntry {
                    name: format!("{name}.A"),
                    rows: p.a.nrows(),
                    cols: p.a.ncols(),
                    file: a_file,
                },
                b: TensorEntry {
                    name: format!("{name}.B"),
                    rows: p.b.nrows(),
                    cols: p.b.ncols(),
                    file: b_file,
                },
            });
        }
        let manifest = Manifest {
            base_id: self.base_id.clone(),
            rank: self.rank,
            alpha: self.alpha,
            names: self.matrices.keys().cloned().collect(),
            tensors,
            metadata: self.metadata.clone(),
        };
        let path = dir.join(CHECKPOINT_MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("corrupt manifest {}: {e}", path.display())))?;
        let mut matrices = BTreeMap::new();
        for t in &m.tensors {
            if t.a.rows != m.rank || t.b.cols != m.rank || t.a.cols != t.cols || t.b.rows != t.rows {
                return Err(Error::Checkpoint(format!(
                    "corrupt manifest: {} shapes inconsistent with rank {}",
                    t.name, m.rank
                )));
            }
            let a = read_f32_blob(&dir.join(&t.a.file), t.a.rows, t.a.cols)?;
            let b = read_f32_blob(&dir.join(&t.b.file), t.b.rows, t.b.cols)?;
            matrices.insert(t.name.clone(), LoraPair { a, b });
        }
        let names: Vec<String> = matrices.keys().cloned().collect();
        if names != m.names {
            return Err(Error::Checkpoint("corrupt manifest: names do not match tensors".into()));
        }
        Ok(Self {
            base_id: m.base_id,
            rank: m.rank,
            alpha: m.alpha,
            matrices,
            metadata: m.metadata,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{sequence_logprob, AdapterConfig, Tokenizer};

    fn model(dim: usize) -> ModelHandle {
        let tok = Tokenizer::fit(["a b c d e f"]);
        let mut m = ModelHandle::tiny("base", tok, dim, 8, 16, 2);
        m.attach_adapter(
            &AdapterConfig {
                rank: 2,
                alpha: 4.0,
                targets: vec!["attn.q".into(), "attn.v".into(), "head.out".into()],
            },
            4,
        )
        .unwrap();
        for (i, p) in m.adapter_mut().unwrap().pairs.values_mut().enumerate() {
            p.b.mapv_inplace(|_| 0.05 * (i as f64 + 1.0));
        }
        m.adapter_mut().unwrap().snap_to_f32();
        m
    }

    #[test]
    fn disk_round_trip_is_bit_exact() {
        let m = model(6);
        let dir = tempfile::tempdir().unwrap();
        let ckpt = export_adapter(&m).unwrap();
        ckpt.save(dir.path()).unwrap();
        let back = AdapterCheckpoint::load(dir.path()).unwrap();
        assert_eq!(back, ckpt);
        let mut plain = m.clone();
        plain.detach_adapter();
        let re = import_adapter(&plain, &back, true).unwrap();
        let seq = m.tokenizer().tokenize("c d e", "a b").unwrap();
        let s1 = sequence_logprob(&m, &seq, true).unwrap();
        let s2 = sequence_logprob(&re, &seq, true).unwrap();
        assert_eq!(s1, s2);
        for (x, y) in s1.token_logprobs.iter().zip(&s2.token_logprobs) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn shape_mismatch_lists_names() {
        let ckpt = export_adapter(&model(6)).unwrap();
        let other = model(8);
        match import_adapter(&other, &ckpt, false) {
            Err(Error::ShapeMismatch(names)) => {
                assert!(names.iter().any(|n| n.starts_with("attn.q")));
                assert!(names.iter().any(|n| n.starts_with("attn.v")));
            }
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn strict_base_checks_id() {
        let ckpt = export_adapter(&model(6)).unwrap();
        let mut sibling = model(6);
        sibling.set_base_id("instruct");
        assert!(matches!(
            import_adapter(&sibling, &ckpt, true),
            Err(Error::BaseMismatch { .. })
        ));
        assert!(import_adapter(&sibling, &ckpt, false).is_ok());
    }

    #[test]
    fn unsnapped_values_refuse_to_save() {
        let mut ckpt = export_adapter(&model(6)).unwrap();
        ckpt.matrices.values_mut().next().unwrap().a[[0, 0]] = 0.1;
        let dir = tempfile::tempdir().unwrap();
        assert!(ckpt.save(dir.path()).is_err());
    }

    #[test]
    fn corrupt_manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(CHECKPOINT_MANIFEST), "{").unwrap();
        assert!(AdapterCheckpoint::load(dir.path()).is_err());
        let empty = tempfile::tempdir().unwrap();
        assert!(AdapterCheckpoint::load(empty.path()).is_err());
    }
}
