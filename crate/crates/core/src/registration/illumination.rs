use crate::error::{Error, Result};
use crate::geometry::{clamp_polygon, polygon_area, rasterize_polygon, Point};
use crate::registration::{estimate_homography, Frame, PlanarCorrespondenceSet, ViewMap};

/// Mean channel-averaged intensity over pixels strictly inside the object
/// polygon. Vertices are clamped to the image first.
pub fn estimate_illumination(frame: &Frame) -> Result<f64> {
    let img = &frame.image;
    let poly = clamp_polygon(&frame.object_polygon, img.width(), img.height());
    if polygon_area(&poly) <= 0.0 {
        return Err(Error::EmptyPolygon);
    }
    let mask = rasterize_polygon(&poly, img.width(), img.height());
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..img.height() {
        for x in 0..img.width() {
            if mask.get(x, y) {
                sum += img.intensity(x, y);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyPolygon);
    }
    Ok(sum / n as f64)
}

/// Builds view maps for `frames` against `root_vertices`, with illumination
/// relative to `reference_intensity` (the first training frame's, by
/// convention). Any failure is reported before returning anything.
pub fn view_maps_for_frames(
    frames: &[Frame],
    root_vertices: &[Point],
    reference_intensity: f64,
) -> Result<Vec<ViewMap>> {
    if !(reference_intensity > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "reference intensity must be positive, got {reference_intensity}"
        )));
    }
    frames
        .iter()
        .map(|f| {
            let corr = PlanarCorrespondenceSet::from_points(root_vertices, &f.object_polygon)?;
            let h = estimate_homography(&corr)?;
            let intensity = estimate_illumination(f)?;
            ViewMap::new(h, intensity / reference_intensity)
        })
        .collect()
}
