//! On-disk record of an attack run.
//!
//! ```text
//! <run>/
//!   config.json          snapshot of the configuration the run started with
//!   history.jsonl        one IterationRecord per line
//!   textures/iter_NNNNN.png
//!   texture.png          final texture
//!   result.json          termination reason and final distances
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{AttackResult, IterationRecord};
use crate::error::{Error, Result};
use crate::registration::TextureMap;

pub const SNAPSHOT_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const TEXTURE_CHECKPOINT_DIR: &str = "textures";
pub const FINAL_TEXTURE_FILE: &str = "texture.png";
pub const RESULT_FILE: &str = "result.json";

pub struct RunDirectory {
    root: PathBuf,
    history: BufWriter<File>,
    checkpoint_every: usize,
}

#[derive(Serialize)]
struct ResultSummary<'a> {
    termination: super::TerminationReason,
    iterations: usize,
    final_record: Option<&'a IterationRecord>,
}

fn json_error(e: serde_json::Error) -> Error {
    Error::Parse {
        what: "run record".into(),
        reason: e.to_string(),
    }
}

impl RunDirectory {
    /// Creates the directory and writes the configuration snapshot. Textures
    /// are checkpointed every `checkpoint_every` steps (never when 0).
    pub fn create(root: impl AsRef<Path>, snapshot: &impl Serialize, checkpoint_every: usize) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let snap = serde_json::to_string_pretty(snapshot).map_err(json_error)?;
        let snap_path = root.join(SNAPSHOT_FILE);
        std::fs::write(&snap_path, snap).map_err(|e| Error::io(&snap_path, e))?;
        let hist_path = root.join(HISTORY_FILE);
        let history = BufWriter::new(File::create(&hist_path).map_err(|e| Error::io(&hist_path, e))?);
        Ok(Self {
            root,
            history,
            checkpoint_every,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn record(&mut self, record: &IterationRecord, texture: &TextureMap) -> Result<()> {
        let line = serde_json::to_string(record).map_err(json_error)?;
        let hist_path = self.root.join(HISTORY_FILE);
        writeln!(self.history, "{line}").map_err(|e| Error::io(&hist_path, e))?;
        let n = record.iteration + 1;
        if self.checkpoint_every > 0 && n % self.checkpoint_every == 0 {
            let dir = self.root.join(TEXTURE_CHECKPOINT_DIR);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            texture.pixels.save_png(dir.join(format!("iter_{n:05}.png")))?;
        }
        Ok(())
    }

    pub fn finish(mut self, result: &AttackResult) -> Result<()> {
        let hist_path = self.root.join(HISTORY_FILE);
        self.history.flush().map_err(|e| Error::io(&hist_path, e))?;
        result.final_texture.pixels.save_png(self.root.join(FINAL_TEXTURE_FILE))?;
        let summary = ResultSummary {
            termination: result.termination,
            iterations: result.history.len(),
            final_record: result.history.last(),
        };
        let path = self.root.join(RESULT_FILE);
        let text = serde_json::to_string_pretty(&summary).map_err(json_error)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Reads `history.jsonl` back.
pub fn read_history(root: impl AsRef<Path>) -> Result<Vec<IterationRecord>> {
    let path = root.as_ref().join(HISTORY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(json_error))
        .collect()
}
