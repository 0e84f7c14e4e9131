//! Registration of frames to the root texture: viewing maps, compositing and
//! gradient transport between frame and root coordinates.

mod homography;
mod illumination;
mod warp;

pub use homography::{
    estimate_homography, max_reprojection_error, Homography, PlanarCorrespondenceSet, ViewMap,
    INVERTIBILITY_TOLERANCE,
};
pub use illumination::{estimate_illumination, view_maps_for_frames};
pub use warp::{backproject_gradient, composite, merge_gradients, WarpPlan};

use serde::{Deserialize, Serialize};

use crate::data::{Distance, Split};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::image::{Image, Mask};

/// The pattern being optimized, in root coordinates.
///
/// When a reference pattern is attached, compositing treats the texture as a
/// perturbation `pixels - reference` of whatever the frame already shows, and
/// scales it by the view's illumination factor. Without a reference the
/// texture replaces the frame content inside the warped mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureMap {
    pub pixels: Image,
    pub mask: Mask,
    reference: Option<Image>,
}

impl TextureMap {
    pub fn new(pixels: Image, mask: Mask) -> Result<Self> {
        if pixels.width() != mask.width() || pixels.height() != mask.height() {
            return Err(Error::shape(
                format!("{}x{} mask", pixels.width(), pixels.height()),
                format!("{}x{}", mask.width(), mask.height()),
            ));
        }
        if !pixels.in_unit_range() {
            return Err(Error::InvalidConfig(
                "texture values must lie in [0, 1]".into(),
            ));
        }
        if mask.is_empty() {
            return Err(Error::Empty("texture mask"));
        }
        Ok(Self {
            pixels,
            mask,
            reference: None,
        })
    }

    /// Attaches `reference` (usually the unperturbed pattern).
    pub fn with_reference(mut self, reference: Image) -> Result<Self> {
        if !reference.same_shape(&self.pixels) {
            return Err(Error::shape(
                format!("{:?}", self.pixels.shape()),
                format!("{:?}", reference.shape()),
            ));
        }
        self.reference = Some(reference);
        Ok(self)
    }

    /// A perturbation texture starting at its own reference.
    pub fn perturbable(pixels: Image, mask: Mask) -> Result<Self> {
        let reference = pixels.clone();
        Self::new(pixels, mask)?.with_reference(reference)
    }

    pub fn reference(&self) -> Option<&Image> {
        self.reference.as_ref()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn channels(&self) -> usize {
        self.pixels.channels()
    }
}

/// Per-frame annotations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub sequence_id: String,
    pub index: usize,
    pub split: Split,
    pub distance: Distance,
    pub condition: String,
}

/// A captured (or rendered) frame with its hand-registered object outline.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub object_polygon: Vec<Point>,
    pub meta: FrameMeta,
}
