use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Distance, Split, OCTAGON_VERTICES};
use crate::error::{Error, Result};
use crate::geometry::{rasterize_polygon, Point};
use crate::image::{Image, Mask};
use crate::registration::{Frame, FrameMeta, TextureMap};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SPLITS_FILE: &str = "splits.toml";
pub const TEXTURE_FILE: &str = "texture.png";
pub const TEXTURE_META_FILE: &str = "texture.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    /// Image file name relative to the sequence directory.
    pub image: String,
    pub vertices: Vec<Point>,
    pub distance: Distance,
    pub condition: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceManifest {
    pub sequence_id: String,
    pub split: Split,
    pub frames: Vec<FrameRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    sequence_id: String,
    frames: Vec<FrameRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitsFile {
    splits: BTreeMap<String, Split>,
}

/// The root pattern and the outline its vertices trace in root coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct RootTexture {
    pub pixels: Image,
    pub vertices: Vec<Point>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextureMetaFile {
    image: String,
    vertices: Vec<Point>,
}

impl RootTexture {
    /// Texels whose centers lie strictly inside the outline.
    pub fn mask(&self) -> Mask {
        rasterize_polygon(&self.vertices, self.pixels.width(), self.pixels.height())
    }

    /// A texture map with `pixels` as both the current pattern and T0.
    pub fn texture_map(&self) -> Result<TextureMap> {
        TextureMap::perturbable(self.pixels.clone(), self.mask())
    }
}

fn annotation_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Annotation {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| annotation_error(path, e.message().to_string()))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Parse {
        what: path.display().to_string(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn validate_record(path: &Path, seq_dir: &Path, i: usize, r: &FrameRecord) -> Result<()> {
    if r.vertices.len() != OCTAGON_VERTICES {
        return Err(annotation_error(
            path,
            format!(
                "frame {i} ({}) has {} vertices, expected {OCTAGON_VERTICES}",
                r.image,
                r.vertices.len()
            ),
        ));
    }
    if r.vertices.iter().flatten().any(|v| !v.is_finite()) {
        return Err(annotation_error(path, format!("frame {i} has a non-finite vertex")));
    }
    let rel = Path::new(&r.image);
    if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(annotation_error(path, format!("frame {i} image path must stay inside the sequence")));
    }
    if !seq_dir.join(rel).is_file() {
        return Err(annotation_error(path, format!("frame {i} image {} does not exist", r.image)));
    }
    Ok(())
}

/// Reads and validates every sequence under `root`. A directory without
/// sequence subdirectories yields an empty list.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<SequenceManifest>> {
    let root = root.as_ref();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(root, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Ok(Vec::new());
    }
    let splits_path = root.join(SPLITS_FILE);
    if !splits_path.is_file() {
        return Err(annotation_error(&splits_path, "missing splits file"));
    }
    let splits: SplitsFile = read_toml(&splits_path)?;

    let mut out = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| annotation_error(dir, "sequence directory name is not UTF-8"))?
            .to_string();
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(annotation_error(&path, "missing sequence manifest"));
        }
        let file: ManifestFile = read_toml(&path)?;
        if file.sequence_id != name {
            return Err(annotation_error(
                &path,
                format!("sequence_id {:?} does not match directory {name:?}", file.sequence_id),
            ));
        }
        if file.frames.is_empty() {
            return Err(annotation_error(&path, "sequence has no frames"));
        }
        for (i, r) in file.frames.iter().enumerate() {
            validate_record(&path, dir, i, r)?;
        }
        let split = *splits
            .splits
            .get(&name)
            .ok_or_else(|| annotation_error(&splits_path, format!("no split for sequence {name:?}")))?;
        out.push(SequenceManifest {
            sequence_id: name,
            split,
            frames: file.frames,
        });
    }
    if let Some(extra) = splits.splits.keys().find(|k| !out.iter().any(|m| &m.sequence_id == *k)) {
        return Err(annotation_error(&splits_path, format!("split listed for missing sequence {extra:?}")));
    }
    Ok(out)
}

/// Loads the images of one sequence as frames.
pub fn load_frames(root: impl AsRef<Path>, manifest: &SequenceManifest) -> Result<Vec<Frame>> {
    let dir = root.as_ref().join(&manifest.sequence_id);
    manifest
        .frames
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(Frame {
                image: Image::load(dir.join(&r.image))?,
                object_polygon: r.vertices.clone(),
                meta: FrameMeta {
                    sequence_id: manifest.sequence_id.clone(),
                    index: i,
                    split: manifest.split,
                    distance: r.distance,
                    condition: r.condition.clone(),
                },
            })
        })
        .collect()
}

/// Writes manifests, frame images and the splits file. `images[s][f]` is
/// frame `f` of sequence `s`.
pub fn write_dataset(root: impl AsRef<Path>, manifests: &[SequenceManifest], images: &[Vec<Image>]) -> Result<()> {
    let root = root.as_ref();
    if manifests.len() != images.len() {
        return Err(Error::shape(format!("{} image lists", manifests.len()), images.len()));
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (m, imgs) in manifests.iter().zip(images) {
        if m.frames.len() != imgs.len() {
            return Err(Error::shape(format!("{} images", m.frames.len()), imgs.len()));
        }
        let dir = root.join(&m.sequence_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (r, img) in m.frames.iter().zip(imgs) {
            img.save_png(dir.join(&r.image))?;
        }
        write_toml(
            &dir.join(MANIFEST_FILE),
            &ManifestFile {
                sequence_id: m.sequence_id.clone(),
                frames: m.frames.clone(),
            },
        )?;
    }
    write_toml(
        &root.join(SPLITS_FILE),
        &SplitsFile {
            splits: manifests.iter().map(|m| (m.sequence_id.clone(), m.split)).collect(),
        },
    )
}

pub fn save_root_texture(root: impl AsRef<Path>, texture: &RootTexture) -> Result<()> {
    let root = root.as_ref();
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    texture.pixels.save_png(root.join(TEXTURE_FILE))?;
    write_toml(
        &root.join(TEXTURE_META_FILE),
        &TextureMetaFile {
            image: TEXTURE_FILE.into(),
            vertices: texture.vertices.clone(),
        },
    )
}

pub fn load_root_texture(root: impl AsRef<Path>) -> Result<RootTexture> {
    let root = root.as_ref();
    let meta_path = root.join(TEXTURE_META_FILE);
    let meta: TextureMetaFile = read_toml(&meta_path)?;
    if meta.vertices.len() < 3 {
        return Err(annotation_error(&meta_path, "texture outline needs at least 3 vertices"));
    }
    Ok(RootTexture {
        pixels: Image::load(root.join(&meta.image))?,
        vertices: meta.vertices,
    })
}
