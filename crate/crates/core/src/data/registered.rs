use std::path::Path;

use super::{load_dataset, load_frames, load_root_texture, GeneratedDataset, RootTexture, SequenceManifest, Split};
use crate::error::Result;
use crate::registration::{estimate_illumination, view_maps_for_frames, Frame, ViewMap};

/// A dataset with every frame registered to the root texture.
///
/// Illumination factors are relative to the first frame of the first
/// training sequence (the first sequence overall when there is no training
/// split).
#[derive(Clone, Debug)]
pub struct RegisteredDataset {
    pub texture: RootTexture,
    pub manifests: Vec<SequenceManifest>,
    pub frames: Vec<Vec<Frame>>,
    pub views: Vec<Vec<ViewMap>>,
    pub reference_intensity: f64,
}

impl RegisteredDataset {
    pub fn new(texture: RootTexture, manifests: Vec<SequenceManifest>, frames: Vec<Vec<Frame>>) -> Result<Self> {
        let reference = manifests
            .iter()
            .zip(&frames)
            .find(|(m, f)| m.split == Split::Train && !f.is_empty())
            .or_else(|| manifests.iter().zip(&frames).find(|(_, f)| !f.is_empty()))
            .map(|(_, f)| &f[0]);
        let reference_intensity = match reference {
            Some(f) => estimate_illumination(f)?,
            None => 1.0,
        };
        let views = frames
            .iter()
            .map(|f| view_maps_for_frames(f, &texture.vertices, reference_intensity))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            texture,
            manifests,
            frames,
            views,
            reference_intensity,
        })
    }

    /// Loads manifests, frames and the root texture from `root`.
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let manifests = load_dataset(root)?;
        let texture = load_root_texture(root)?;
        let frames = manifests
            .iter()
            .map(|m| load_frames(root, m))
            .collect::<Result<Vec<_>>>()?;
        Self::new(texture, manifests, frames)
    }

    pub fn from_generated(generated: &GeneratedDataset) -> Result<Self> {
        Self::new(
            generated.texture.clone(),
            generated.manifests.clone(),
            generated.frames.clone(),
        )
    }

    /// Frames and views of one split, in manifest order.
    pub fn split(&self, split: Split) -> (Vec<Frame>, Vec<ViewMap>) {
        self.select(|m| m.split == split)
    }

    pub fn all(&self) -> (Vec<Frame>, Vec<ViewMap>) {
        self.select(|_| true)
    }

    fn select(&self, keep: impl Fn(&SequenceManifest) -> bool) -> (Vec<Frame>, Vec<ViewMap>) {
        let mut frames = Vec::new();
        let mut views = Vec::new();
        for ((m, f), v) in self.manifests.iter().zip(&self.frames).zip(&self.views) {
            if keep(m) {
                frames.extend(f.iter().cloned());
                views.extend(v.iter().copied());
            }
        }
        (frames, views)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }
}
