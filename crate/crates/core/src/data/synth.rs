//! Procedural scenes: an octagonal sign rendered under sampled homographies
//! and lighting over cluttered ("tree") or plain ("sky") backgrounds.

use std::path::Path;

use nalgebra::Matrix3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{save_root_texture, write_dataset, FrameRecord, RootTexture, SequenceManifest};
use super::{split_dataset, Distance, Split};
use crate::defenses::{down_up_sample, tv_denoise};
use crate::detector::{GroundTruth, TrainingSample};
use crate::error::{Error, Result};
use crate::geometry::{point_in_polygon, polygon_area, regular_octagon, Point, Rect};
use crate::image::{Image, Mask};
use crate::registration::{composite, Frame, FrameMeta, Homography, TextureMap, ViewMap};

/// Class index of the rendered stop sign in the default class list.
const STOP_CLASS: usize = 1;
/// Class index of the diamond distractor in the default class list.
const WARNING_CLASS: usize = 2;

const GLYPH_ROWS: usize = 7;
const GLYPH_COLS: usize = 5;

fn glyph(c: char) -> [&'static str; GLYPH_ROWS] {
    match c {
        'S' => [".####", "#....", "#....", ".###.", "....#", "....#", "####."],
        'T' => ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."],
        'O' => [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
        'P' => ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
        _ => ["....."; GLYPH_ROWS],
    }
}

/// A `size`×`size` stop sign: white rim, red face, blocky white lettering.
/// The outline is the outer octagon.
pub fn stop_sign_texture(size: usize) -> RootTexture {
    let c = (size as f64 - 1.0) / 2.0;
    let outer = regular_octagon([c, c], size as f64 * 62.0 / 128.0);
    let inner = regular_octagon([c, c], size as f64 * 56.0 / 128.0);
    let scale = (size / 32).max(1);
    let (gw, gh, gap) = (GLYPH_COLS * scale, GLYPH_ROWS * scale, (3 * scale).div_ceil(4));
    let text = "STOP";
    let total_w = text.len() * gw + (text.len() - 1) * gap;
    let x0 = (size.saturating_sub(total_w)) / 2;
    let y0 = (size.saturating_sub(gh)) / 2;
    let letter_at = |x: usize, y: usize| -> bool {
        if y < y0 || y >= y0 + gh || x < x0 {
            return false;
        }
        let dx = x - x0;
        let (slot, within) = (dx / (gw + gap), dx % (gw + gap));
        match text.chars().nth(slot) {
            Some(ch) if within < gw => glyph(ch)[(y - y0) / scale].as_bytes()[within / scale] == b'#',
            _ => false,
        }
    };
    // 8-bit grid values, so T0 + k/255 survives quantization exactly.
    let white = [242.0 / 255.0; 3];
    let red = [194.0 / 255.0, 18.0 / 255.0, 23.0 / 255.0];
    let pixels = Image::from_fn(size, size, 3, |x, y, ch| {
        let p = [x as f64, y as f64];
        if point_in_polygon(p, &inner) && !letter_at(x, y) {
            red[ch]
        } else {
            white[ch]
        }
    });
    RootTexture { pixels, vertices: outer }
}

/// A `size`×`size` yellow diamond with a black rim and exclamation mark.
pub fn warning_sign_texture(size: usize) -> RootTexture {
    let s = size as f64;
    let c = (s - 1.0) / 2.0;
    let r = 0.48 * s;
    let diamond = |r: f64| vec![[c, c - r], [c + r, c], [c, c + r], [c - r, c]];
    let outer = diamond(r);
    let inner = diamond(r - 0.06 * s);
    let pixels = Image::from_fn(size, size, 3, |x, y, ch| {
        let (xf, yf) = (x as f64, y as f64);
        let bar = (xf - c).abs() < 0.05 * s && yf > c - 0.25 * s && yf < c + 0.08 * s;
        let dot = (xf - c).abs() < 0.05 * s && yf > c + 0.15 * s && yf < c + 0.24 * s;
        let yellow = [0.96, 0.80, 0.12];
        if point_in_polygon([xf, yf], &inner) && !bar && !dot {
            yellow[ch]
        } else {
            0.08
        }
    });
    RootTexture { pixels, vertices: outer }
}

/// Smooth random field in [0,1] with features about `cell` pixels wide.
fn value_noise(w: usize, h: usize, cell: f64, rng: &mut impl Rng) -> Vec<f64> {
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let gy = y as f64 / cell;
        let (iy, ty) = (gy.floor() as usize, smooth(gy.fract()));
        for x in 0..w {
            let gx = x as f64 / cell;
            let (ix, tx) = (gx.floor() as usize, smooth(gx.fract()));
            let g = |i: usize, j: usize| grid[j * gw + i];
            let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
            let bottom = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

fn tree_background(w: usize, h: usize, rng: &mut impl Rng) -> Image {
    let coarse = value_noise(w, h, 28.0, rng);
    let mid = value_noise(w, h, 9.0, rng);
    let fine = value_noise(w, h, 3.0, rng);
    let dark = [0.10, 0.20, 0.07];
    let light = [0.34, 0.44, 0.17];
    let mut img = Image::from_fn(w, h, 3, |x, y, ch| {
        let i = y * w + x;
        let base = lerp3(dark, light, coarse[i]);
        base[ch] + 0.18 * (mid[i] - 0.5) + 0.12 * (fine[i] - 0.5)
    });
    for _ in 0..rng.gen_range(1..=3) {
        let x0 = rng.gen_range(0..w) as f64;
        let half = rng.gen_range(3.0..8.0);
        let tint = rng.gen_range(0.8..1.1);
        for y in 0..h {
            for x in 0..w {
                if (x as f64 - x0).abs() < half {
                    let n = mid[y * w + x];
                    for (ch, v) in [0.30, 0.21, 0.13].into_iter().enumerate() {
                        img.set(x, y, ch, v * tint * (0.8 + 0.4 * n));
                    }
                }
            }
        }
    }
    let palette = [[0.18, 0.33, 0.10], [0.40, 0.50, 0.20], [0.44, 0.28, 0.14], [0.55, 0.48, 0.22]];
    for _ in 0..70 {
        let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let (rx, ry) = (rng.gen_range(2.5..10.0), rng.gen_range(2.5..10.0));
        let color = palette[rng.gen_range(0..palette.len())];
        let alpha = rng.gen_range(0.4..0.8);
        let (xa, xb) = ((cx - rx).max(0.0) as usize, ((cx + rx).ceil() as usize).min(w));
        let (ya, yb) = ((cy - ry).max(0.0) as usize, ((cy + ry).ceil() as usize).min(h));
        for y in ya..yb {
            for x in xa..xb {
                let d = ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2);
                if d < 1.0 {
                    for (ch, &col) in color.iter().enumerate() {
                        let v = img.get(x, y, ch);
                        img.set(x, y, ch, v + alpha * (col - v));
                    }
                }
            }
        }
    }
    img.clip_unit();
    img
}

fn sky_background(w: usize, h: usize, rng: &mut impl Rng) -> Image {
    let top = [0.38, 0.60, 0.92];
    let horizon = [0.78, 0.86, 0.96];
    let ground_line = h as f64 * rng.gen_range(0.82..0.95);
    let clouds: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(1..=3))
        .map(|_| {
            (
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.0..0.6 * h as f64),
                rng.gen_range(20.0..60.0),
                rng.gen_range(0.3..0.7),
            )
        })
        .collect();
    let grain = value_noise(w, h, 4.0, rng);
    let mut img = Image::from_fn(w, h, 3, |x, y, ch| {
        let (xf, yf) = (x as f64, y as f64);
        if yf > ground_line {
            return 0.42 + 0.06 * (grain[y * w + x] - 0.5);
        }
        let mut v = lerp3(top, horizon, yf / ground_line)[ch];
        for &(cx, cy, r, a) in &clouds {
            let d2 = ((xf - cx) / (2.0 * r)).powi(2) + ((yf - cy) / r).powi(2);
            v += (1.0 - v) * a * (-d2).exp();
        }
        v
    });
    img.clip_unit();
    img
}

/// Renders a background for `condition` ("tree" or "sky").
pub fn render_background(condition: &str, width: usize, height: usize, rng: &mut impl Rng) -> Result<Image> {
    match condition {
        "tree" => Ok(tree_background(width, height, rng)),
        "sky" => Ok(sky_background(width, height, rng)),
        other => Err(Error::InvalidConfig(format!("unknown background condition {other:?}"))),
    }
}

/// Object widths in frame pixels (bounding-box width) per distance tag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleBands {
    pub far: (f64, f64),
    pub medium: (f64, f64),
    pub near: (f64, f64),
}

impl Default for ScaleBands {
    fn default() -> Self {
        Self {
            far: (40.0, 52.0),
            medium: (64.0, 80.0),
            near: (100.0, 124.0),
        }
    }
}

impl ScaleBands {
    pub fn band(&self, d: Distance) -> (f64, f64) {
        match d {
            Distance::Far => self.far,
            Distance::Medium => self.medium,
            Distance::Near => self.near,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        if !(ok(self.far) && ok(self.medium) && ok(self.near)) {
            return Err(Error::InvalidConfig(format!("malformed scale bands {self:?}")));
        }
        if !(self.far.1 < self.medium.0 && self.medium.1 < self.near.0) {
            return Err(Error::InvalidConfig("scale bands must be disjoint and ordered far < medium < near".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    /// Side of the square root texture; the stop-sign pattern is T0.
    pub texture_size: usize,
    pub frame_width: usize,
    pub frame_height: usize,
    pub sequences: usize,
    /// Distance tag of each frame of a sequence, in capture order.
    pub frame_distances: Vec<Distance>,
    /// Background pool; sequence `i` uses `conditions[i % len]`.
    pub conditions: Vec<String>,
    pub scale_bands: ScaleBands,
    pub max_roll_degrees: f64,
    /// Bound on the projective row entries, per root pixel from the center.
    pub perspective: f64,
    pub illumination: (f64, f64),
    pub noise_std: f64,
    pub split_ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            texture_size: 128,
            frame_width: 320,
            frame_height: 240,
            sequences: 22,
            frame_distances: vec![Distance::Far, Distance::Far, Distance::Medium, Distance::Medium, Distance::Near],
            conditions: vec!["tree".into(), "sky".into()],
            scale_bands: ScaleBands::default(),
            max_roll_degrees: 8.0,
            perspective: 0.0015,
            illumination: (0.7, 1.1),
            noise_std: 0.01,
            split_ratios: [12.0 / 22.0, 5.0 / 22.0, 5.0 / 22.0],
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.scale_bands.validate()?;
        let (lo, hi) = self.illumination;
        if !(lo > 0.0 && lo <= hi && hi <= 2.0) {
            return Err(Error::InvalidConfig(format!("illumination range {lo}..{hi} must lie in (0, 2]")));
        }
        if self.frame_distances.is_empty() || self.conditions.is_empty() || self.texture_size < 8 {
            return Err(Error::InvalidConfig("need frames, conditions and a texture of at least 8 px".into()));
        }
        if self.scale_bands.near.1 + 4.0 > self.frame_width.min(self.frame_height) as f64 {
            return Err(Error::InvalidConfig("near band does not fit in the frame".into()));
        }
        if !(self.noise_std >= 0.0 && self.perspective >= 0.0 && self.max_roll_degrees >= 0.0) {
            return Err(Error::InvalidConfig("noise, perspective and roll must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Frames and annotations as generated, before any disk round trip.
#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub texture: RootTexture,
    pub manifests: Vec<SequenceManifest>,
    pub frames: Vec<Vec<Frame>>,
    /// Sampled root-to-frame homographies, `[sequence][frame]`.
    pub homographies: Vec<Vec<Homography>>,
    /// Sampled lighting gains, `[sequence][frame]`.
    pub lighting: Vec<Vec<f64>>,
}

impl GeneratedDataset {
    pub fn frames_in(&self, split: Split) -> Vec<Frame> {
        self.frames
            .iter()
            .zip(&self.manifests)
            .filter(|(_, m)| m.split == split)
            .flat_map(|(f, _)| f.iter().cloned())
            .collect()
    }
}

struct Pose {
    roll: f64,
    persp: [f64; 2],
    /// Position of the bounding box inside its feasible range, in [0,1]².
    place: [f64; 2],
}

/// `T(c) · s·R(roll) · P · T(−root_center)`, with `s` and `c` chosen so the
/// outline's bounding box has width `target_width` and sits at `pose.place`.
fn pose_homography(
    root: &[Point],
    root_center: Point,
    pose: &Pose,
    target_width: f64,
    frame_w: usize,
    frame_h: usize,
    margin: f64,
) -> Option<Homography> {
    let (sin, cos) = pose.roll.sin_cos();
    let build = |s: f64, cx: f64, cy: f64| -> Option<Homography> {
        let t0 = Matrix3::new(1.0, 0.0, -root_center[0], 0.0, 1.0, -root_center[1], 0.0, 0.0, 1.0);
        let p = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, pose.persp[0], pose.persp[1], 1.0);
        let rs = Matrix3::new(s * cos, -s * sin, 0.0, s * sin, s * cos, 0.0, 0.0, 0.0, 1.0);
        let t1 = Matrix3::new(1.0, 0.0, cx, 0.0, 1.0, cy, 0.0, 0.0, 1.0);
        Homography::from_matrix(t1 * rs * p * t0).ok()
    };
    let bbox = |h: &Homography| -> Option<Rect> {
        let pts: Option<Vec<Point>> = root.iter().map(|&v| h.apply(v)).collect();
        Rect::bounding(&pts?)
    };
    let unit = bbox(&build(1.0, 0.0, 0.0)?)?;
    let s = target_width / unit.width();
    let at_origin = bbox(&build(s, 0.0, 0.0)?)?;
    let (lo_x, hi_x) = (margin - at_origin.x_min, frame_w as f64 - margin - at_origin.x_max);
    let (lo_y, hi_y) = (margin - at_origin.y_min, frame_h as f64 - margin - at_origin.y_max);
    if hi_x < lo_x || hi_y < lo_y {
        return None;
    }
    let cx = lo_x + (hi_x - lo_x) * pose.place[0];
    let cy = lo_y + (hi_y - lo_y) * pose.place[1];
    build(s, cx, cy)
}

/// Composites `object` (lit by `lighting`) over `background` through `h`.
/// Returns the image and the outline's frame-space vertices.
pub(crate) fn render_object(
    background: &Image,
    object: &RootTexture,
    mask: &Mask,
    h: &Homography,
    lighting: f64,
) -> Result<(Image, Vec<Point>)> {
    let mut lit = object.pixels.clone();
    lit.data_mut().iter_mut().for_each(|v| *v = (*v * lighting).min(1.0));
    let texture = TextureMap::new(lit, mask.clone())?;
    let out = composite(background, &texture, &ViewMap::new(*h, 1.0)?)?;
    let vertices = object
        .vertices
        .iter()
        .map(|&v| h.apply(v).ok_or(Error::SingularHomography { det: h.determinant() }))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, vertices))
}

fn add_noise(img: &mut Image, std: f64, rng: &mut impl Rng) {
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("finite std");
        img.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    img.clip_unit();
}

fn sample_in(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Generates the synthetic sequences; writes them to `out` when given.
/// Frames are quantized to 8 bits so the in-memory result equals what a
/// reload from disk produces.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, out: Option<&Path>) -> Result<GeneratedDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let texture = stop_sign_texture(spec.texture_size);
    let mask = texture.mask();
    let c = (spec.texture_size as f64 - 1.0) / 2.0;
    let (fw, fh) = (spec.frame_width, spec.frame_height);
    let roll_max = spec.max_roll_degrees.to_radians();

    let mut manifests = Vec::with_capacity(spec.sequences);
    let mut frames = Vec::with_capacity(spec.sequences);
    let mut homographies = Vec::with_capacity(spec.sequences);
    let mut lighting = Vec::with_capacity(spec.sequences);
    for s in 0..spec.sequences {
        let id = format!("seq_{s:03}");
        let condition = spec.conditions[s % spec.conditions.len()].clone();
        let background = render_background(&condition, fw, fh, &mut rng)?;
        let base_roll = rng.gen_range(-0.7..=0.7) * roll_max;
        let base_persp = [0, 1].map(|_| rng.gen_range(-0.6..=0.6) * spec.perspective);
        let base_place = [rng.gen_range(0.15..0.85), rng.gen_range(0.1..0.7)];
        let base_light = sample_in(&mut rng, spec.illumination);

        // Widths within one band increase along the sequence.
        let mut widths: Vec<f64> =
            spec.frame_distances.iter().map(|&d| sample_in(&mut rng, spec.scale_bands.band(d))).collect();
        for d in Distance::ALL {
            let idx: Vec<usize> = (0..widths.len()).filter(|&i| spec.frame_distances[i] == d).collect();
            let mut ws: Vec<f64> = idx.iter().map(|&i| widths[i]).collect();
            ws.sort_by(f64::total_cmp);
            for (i, w) in idx.into_iter().zip(ws) {
                widths[i] = w;
            }
        }

        let mut records = Vec::new();
        let mut seq_frames = Vec::new();
        let mut seq_h = Vec::new();
        let mut seq_l = Vec::new();
        let mut areas: Vec<(Distance, f64)> = Vec::new();
        for (f, (&distance, &width)) in spec.frame_distances.iter().zip(&widths).enumerate() {
            let mut attempt = 0;
            let (h, vertices_area) = loop {
                attempt += 1;
                if attempt > 200 {
                    return Err(Error::InvalidConfig(format!("could not place frame {f} of {id}")));
                }
                let pose = Pose {
                    roll: (base_roll + rng.gen_range(-0.3..=0.3) * roll_max).clamp(-roll_max, roll_max),
                    persp: [0, 1].map(|i| {
                        (base_persp[i] + rng.gen_range(-0.4..=0.4) * spec.perspective)
                            .clamp(-spec.perspective, spec.perspective)
                    }),
                    place: [0, 1].map(|i| (base_place[i] + rng.gen_range(-0.12..=0.12f64)).clamp(0.0, 1.0)),
                };
                let Some(h) = pose_homography(&texture.vertices, [c, c], &pose, width, fw, fh, 2.0) else {
                    continue;
                };
                let verts: Vec<Point> = texture.vertices.iter().filter_map(|&v| h.apply(v)).collect();
                let area = polygon_area(&verts);
                let ordered = areas.iter().all(|&(d, a)| match d.cmp(&distance) {
                    std::cmp::Ordering::Less => a < area,
                    std::cmp::Ordering::Greater => a > area,
                    std::cmp::Ordering::Equal => true,
                });
                if verts.len() == texture.vertices.len() && ordered {
                    break (h, area);
                }
            };
            areas.push((distance, vertices_area));
            let light = (base_light * rng.gen_range(0.95..=1.05)).clamp(spec.illumination.0, spec.illumination.1);
            let (mut image, vertices) = render_object(&background, &texture, &mask, &h, light)?;
            add_noise(&mut image, spec.noise_std, &mut rng);
            let image = image.quantized();
            let name = format!("frame_{f:04}.png");
            records.push(FrameRecord {
                image: name,
                vertices: vertices.clone(),
                distance,
                condition: condition.clone(),
            });
            seq_frames.push(Frame {
                image,
                object_polygon: vertices,
                meta: FrameMeta {
                    sequence_id: id.clone(),
                    index: f,
                    split: Split::Train,
                    distance,
                    condition: condition.clone(),
                },
            });
            seq_h.push(h);
            seq_l.push(light);
        }
        manifests.push(SequenceManifest {
            sequence_id: id,
            split: Split::Train,
            frames: records,
        });
        frames.push(seq_frames);
        homographies.push(seq_h);
        lighting.push(seq_l);
    }

    let splits = split_dataset(&manifests, spec.split_ratios, spec.seed)?;
    for ((m, fs), split) in manifests.iter_mut().zip(&mut frames).zip(splits) {
        m.split = split;
        fs.iter_mut().for_each(|f| f.meta.split = split);
    }

    if let Some(root) = out {
        let images: Vec<Vec<Image>> = frames.iter().map(|fs| fs.iter().map(|f| f.image.clone()).collect()).collect();
        write_dataset(root, &manifests, &images)?;
        save_root_texture(root, &texture)?;
    }
    Ok(GeneratedDataset {
        texture,
        manifests,
        frames,
        homographies,
        lighting,
    })
}

/// Parameters of the detector-training image set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSetSpec {
    pub count: usize,
    pub seed: u64,
    pub texture_size: usize,
    pub frame_width: usize,
    pub frame_height: usize,
    pub conditions: Vec<String>,
    /// Range of stop-sign bounding-box widths.
    pub width_range: (f64, f64),
    pub distractor_width_range: (f64, f64),
    /// Fraction of images without a stop sign.
    pub empty_fraction: f64,
    /// Probability of adding a diamond distractor to an image.
    pub distractor_fraction: f64,
    pub max_roll_degrees: f64,
    pub perspective: f64,
    pub illumination: (f64, f64),
    pub noise_std: f64,
    /// Fraction of images passed through a smoothing transform.
    pub smoothing_fraction: f64,
}

impl Default for TrainingSetSpec {
    fn default() -> Self {
        Self {
            count: 600,
            seed: 1,
            texture_size: 128,
            frame_width: 320,
            frame_height: 240,
            conditions: vec!["tree".into(), "sky".into()],
            width_range: (32.0, 132.0),
            distractor_width_range: (32.0, 110.0),
            empty_fraction: 0.1,
            distractor_fraction: 0.4,
            max_roll_degrees: 10.0,
            perspective: 0.0018,
            illumination: (0.6, 1.15),
            noise_std: 0.012,
            smoothing_fraction: 0.2,
        }
    }
}

fn random_pose(rng: &mut impl Rng, roll_max: f64, perspective: f64) -> Pose {
    Pose {
        roll: rng.gen_range(-1.0..=1.0) * roll_max,
        persp: [0, 1].map(|_| rng.gen_range(-1.0..=1.0) * perspective),
        place: [rng.gen(), rng.gen()],
    }
}

/// Labelled images for training detectors: stop signs at all scales,
/// optional diamond distractors, and some images without any sign.
pub fn training_samples(spec: &TrainingSetSpec) -> Result<Vec<TrainingSample>> {
    if spec.conditions.is_empty() || spec.count == 0 {
        return Err(Error::InvalidConfig("training set needs conditions and a positive count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let stop = stop_sign_texture(spec.texture_size);
    let stop_mask = stop.mask();
    let warn = warning_sign_texture(spec.texture_size * 3 / 4);
    let warn_mask = warn.mask();
    let (fw, fh) = (spec.frame_width, spec.frame_height);
    let roll_max = spec.max_roll_degrees.to_radians();
    let center = |t: &RootTexture| {
        let c = (t.pixels.width() as f64 - 1.0) / 2.0;
        [c, c]
    };

    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let condition = &spec.conditions[rng.gen_range(0..spec.conditions.len())];
        let mut image = render_background(condition, fw, fh, &mut rng)?;
        let mut objects = Vec::new();
        if !rng.gen_bool(spec.empty_fraction) {
            let width = sample_in(&mut rng, spec.width_range);
            let h = loop {
                let pose = random_pose(&mut rng, roll_max, spec.perspective);
                if let Some(h) = pose_homography(&stop.vertices, center(&stop), &pose, width, fw, fh, 1.0) {
                    break h;
                }
            };
            let light = sample_in(&mut rng, spec.illumination);
            let (img, verts) = render_object(&image, &stop, &stop_mask, &h, light)?;
            image = img;
            let rect = Rect::bounding(&verts).expect("nonempty outline");
            objects.push(GroundTruth { class: STOP_CLASS, rect });
        }
        if rng.gen_bool(spec.distractor_fraction) {
            let width = sample_in(&mut rng, spec.distractor_width_range);
            for _ in 0..20 {
                let pose = random_pose(&mut rng, roll_max, spec.perspective);
                let Some(h) = pose_homography(&warn.vertices, center(&warn), &pose, width, fw, fh, 1.0) else {
                    continue;
                };
                let verts: Vec<Point> = warn.vertices.iter().filter_map(|&v| h.apply(v)).collect();
                let rect = Rect::bounding(&verts).expect("nonempty outline");
                if objects.iter().any(|o: &GroundTruth| o.rect.intersection(&rect) > 0.0) {
                    continue;
                }
                let light = sample_in(&mut rng, spec.illumination);
                image = render_object(&image, &warn, &warn_mask, &h, light)?.0;
                objects.push(GroundTruth {
                    class: WARNING_CLASS,
                    rect,
                });
                break;
            }
        }
        add_noise(&mut image, spec.noise_std, &mut rng);
        if rng.gen_bool(spec.smoothing_fraction) {
            image = if rng.gen_bool(0.5) {
                down_up_sample(&image)?
            } else {
                tv_denoise(&image, rng.gen_range(0.05..=0.2))?
            };
        }
        out.push(TrainingSample::new(&image, objects));
    }
    Ok(out)
}
