//! Full training checkpoints: the adapter directory, optimizer moments and
//! enough loop state to continue on the exact same trajectory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, TrainState, Trainer, TrainingConfig};
use crate::corpus::StereoInstance;
use crate::error::{Error, Result};
use crate::scoring::{import_adapter, AdapterCheckpoint, ModelHandle};

pub const STATE_MANIFEST: &str = "state.json";
const ADAPTER_DIR: &str = "adapter";
const OPTIMIZER_BLOB: &str = "optimizer.bin";

#[derive(Serialize, Deserialize)]
struct SavedState {
    config: TrainingConfig,
    state: TrainState,
    stream_origin: u64,
    stream_position: u64,
    optimizer_t: u64,
    optimizer_shapes: Vec<(String, (usize, usize))>,
}

pub fn save_checkpoint(trainer: &Trainer, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    trainer.adapter_checkpoint()?.save(&dir.join(ADAPTER_DIR))?;
    let blob_path = dir.join(OPTIMIZER_BLOB);
    fs::write(&blob_path, trainer.optimizer.state_blob()).map_err(|e| Error::io(&blob_path, e))?;
    let saved = SavedState {
        config: trainer.config.clone(),
        state: trainer.state.clone(),
        stream_origin: trainer.stream_origin,
        stream_position: trainer.stream.position(),
        optimizer_t: trainer.optimizer.t,
        optimizer_shapes: trainer.optimizer.shapes(),
    };
    let path = dir.join(STATE_MANIFEST);
    let json = serde_json::to_string_pretty(&saved).expect("state serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Rebuilds a trainer from `dir` on top of `base` (whose own adapter, if
/// any, is replaced). `instances` must be the training set of the original
/// run.
pub fn resume(dir: &Path, base: &ModelHandle, instances: Vec<StereoInstance>) -> Result<Trainer> {
    let path = dir.join(STATE_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let saved: SavedState = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("corrupt manifest {}: {e}", path.display())))?;
    let ckpt = AdapterCheckpoint::load(&dir.join(ADAPTER_DIR))?;
    if ckpt.metadata.training_step != saved.state.step {
        return Err(Error::Checkpoint(format!(
            "adapter is at step {} but state is at step {}",
            ckpt.metadata.training_step, saved.state.step
        )));
    }
    let model = import_adapter(base, &ckpt, true)?;

    let blob_path = dir.join(OPTIMIZER_BLOB);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut optimizer = AdamW::new(saved.config.weight_decay);
    optimizer.t = saved.optimizer_t;
    optimizer
        .restore_blob(&saved.optimizer_shapes, &blob)
        .ok_or_else(|| Error::Checkpoint("optimizer state has the wrong size".into()))?;

    if saved.stream_position != saved.state.step - saved.stream_origin {
        return Err(Error::Checkpoint("stream position disagrees with step count".into()));
    }
    Trainer::assemble(
        model,
        instances,
        saved.config,
        saved.state,
        optimizer,
        saved.stream_origin,
    )
}
