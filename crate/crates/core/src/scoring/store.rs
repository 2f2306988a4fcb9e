use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{Architecture, ModelHandle, ParamStore};
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};

pub const MODEL_MANIFEST: &str = "model.json";

/// Writes a matrix as little-endian float32, row-major.
pub fn write_f32_blob(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(m.len() * 4);
    for v in m.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_f32_blob(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} bytes for {rows}x{cols}, found {}",
            path.display(),
            rows * cols * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    base_id: String,
    architecture: Architecture,
    vocab: Tokenizer,
    params: Vec<TensorEntry>,
}

impl ModelHandle {
    /// Writes the base model (not the adapter) as `model.json` plus one
    /// float32 blob per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut params = Vec::new();
        for (name, m) in self.base_params() {
            let file = format!("{name}.bin");
            write_f32_blob(&dir.join(&file), m)?;
            params.push(TensorEntry {
                name: name.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
                file,
            });
        }
        let manifest = ModelManifest {
            base_id: self.base_id().to_string(),
            architecture: self.architecture(),
            vocab: self.tokenizer().clone(),
            params,
        };
        let path = dir.join(MODEL_MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: ModelManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut base = ParamStore::new();
        for t in &manifest.params {
            base.insert(t.name.clone(), read_f32_blob(&dir.join(&t.file), t.rows, t.cols)?);
        }
        ModelHandle::from_parts(manifest.base_id, manifest.architecture, manifest.vocab, base)
    }
}
