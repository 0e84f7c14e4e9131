//! Annotated frame sequences: on-disk format, synthetic generation, splits.
//!
//! # Directory layout
//!
//! ```text
//! <root>/
//!   texture.png            root pattern T0 (optional for loading frames)
//!   texture.toml           root vertices of the object outline
//!   splits.toml            [splits] <sequence_id> = "train" | "val" | "test"
//!   <sequence_id>/
//!     manifest.toml        one [[frames]] table per frame
//!     frame_0000.png       8-bit RGB
//!     ...
//! ```
//!
//! A frame record carries the image file name (relative to the sequence
//! directory), the eight object vertices in frame pixel coordinates, a
//! distance tag and a condition tag. Images are quantized to 8 bits with
//! round-half-to-even on write.

mod manifest;
mod registered;
mod split;
mod synth;

pub use manifest::{
    load_dataset, load_frames, load_root_texture, save_root_texture, write_dataset, FrameRecord,
    RootTexture, SequenceManifest, MANIFEST_FILE, SPLITS_FILE, TEXTURE_FILE, TEXTURE_META_FILE,
};
pub use registered::RegisteredDataset;
pub use split::split_dataset;
pub use synth::{
    generate_synthetic, render_background, stop_sign_texture, training_samples, warning_sign_texture,
    GeneratedDataset, ScaleBands, SyntheticSceneSpec, TrainingSetSpec,
};

use serde::{Deserialize, Serialize};

/// Number of annotated outline vertices for octagonal objects.
pub const OCTAGON_VERTICES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(crate::Error::Parse {
                what: "split".into(),
                reason: format!("unknown split {other:?}"),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Far,
    Medium,
    Near,
}

impl Distance {
    pub const ALL: [Distance; 3] = [Distance::Far, Distance::Medium, Distance::Near];

    pub fn as_str(&self) -> &'static str {
        match self {
            Distance::Far => "far",
            Distance::Medium => "medium",
            Distance::Near => "near",
        }
    }
}

impl std::str::FromStr for Distance {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "far" => Ok(Distance::Far),
            "medium" => Ok(Distance::Medium),
            "near" => Ok(Distance::Near),
            other => Err(crate::Error::Parse {
                what: "distance".into(),
                reason: format!("unknown distance {other:?}"),
            }),
        }
    }
}
