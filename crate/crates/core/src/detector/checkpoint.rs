//! Model checkpoints.
//!
//! A checkpoint is a JSON document:
//!
//! ```text
//! {
//!   "format": "advdet-checkpoint",
//!   "version": 1,
//!   "id": "grid",
//!   "classes": ["background", "stop_sign", "warning_sign"],
//!   "architecture": { "kind": "grid", ... },
//!   "parameters": [ { "name": "conv0.weight", "shape": [8, 3, 3, 3], "data": [...] }, ... ]
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so loading reproduces the
//! parameters bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::nn::Tensor;
use super::{Architecture, Detector, DetectorModel, GridDetector, TwoStageDetector};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "advdet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    id: String,
    classes: Vec<String>,
    architecture: Architecture,
    parameters: Vec<Tensor>,
}

pub fn save_checkpoint(model: &DetectorModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        id: model.id().to_string(),
        classes: model.classes().to_vec(),
        architecture: model.architecture(),
        parameters: model.parameters().to_vec(),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DetectorModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", file.version)));
    }
    Ok(match file.architecture {
        Architecture::Grid(a) => DetectorModel::Grid(GridDetector::from_parts(file.id, a, file.classes, file.parameters)?),
        Architecture::TwoStage(a) => {
            DetectorModel::TwoStage(TwoStageDetector::from_parts(file.id, a, file.classes, file.parameters)?)
        }
    })
}
