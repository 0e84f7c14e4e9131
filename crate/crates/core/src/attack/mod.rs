//! Signed-gradient optimization of a root texture against a detector.
//!
//! The objective over `N` registered training frames is
//!
//! ```text
//! Φ(T) = (1/N) Σᵢ agg_{b ∈ Bᵢ} φ(b; I(Mᵢ, T)) + λ ‖T − T0‖²
//! ```
//!
//! where `Bᵢ` is the target-class box set selected on the composited frame
//! (recomputed every iteration and then held fixed for differentiation),
//! `agg` is the mean or max over boxes, and the penalty runs over texels in
//! the texture mask. A frame with no selected box contributes zero score and
//! zero gradient. Each iteration moves every active texel channel by `−ε`,
//! `0` or `+ε` (the negated sign of `∇Φ`) and clips to `[0, 1]`.

mod run;
mod rundir;

pub use run::{run_attack, run_attack_with, single_image_attack, SingleImageOutcome, SingleImageRegion};
pub use rundir::{
    read_history, RunDirectory, FINAL_TEXTURE_FILE, HISTORY_FILE, RESULT_FILE, SNAPSHOT_FILE, TEXTURE_CHECKPOINT_DIR,
};

use serde::{Deserialize, Serialize};

use crate::detector::{select_boxes, Aggregation, BoxSelection, Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::registration::{merge_gradients, Frame, TextureMap, ViewMap, WarpPlan};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Termination {
    /// Stop once the validation fool rate exceeds this value.
    pub val_fool_rate: f64,
    pub max_iterations: usize,
}

impl Default for Termination {
    fn default() -> Self {
        Self {
            val_fool_rate: 0.9,
            max_iterations: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Per-step, per-channel change in `[0, 1]` units.
    pub epsilon: f64,
    pub lambda_l2: f64,
    pub aggregation: Aggregation,
    pub termination: Termination,
    /// Texels allowed to change; must lie inside the texture mask.
    #[serde(skip)]
    pub region_mask: Option<Mask>,
    /// Recorded with the run; the optimizer itself draws no random numbers.
    pub seed: u64,
    pub boxes: BoxSelection,
    pub detector: DetectorConfig,
    /// Consecutive steps with `|ΔΦ| ≤ 1e-12` after which the run stops.
    pub stall_window: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0 / 255.0,
            lambda_l2: 0.0,
            aggregation: Aggregation::Mean,
            termination: Termination::default(),
            region_mask: None,
            seed: 0,
            boxes: BoxSelection::default(),
            detector: DetectorConfig::default(),
            stall_window: 50,
        }
    }
}

pub const STALL_TOLERANCE: f64 = 1e-12;

impl AttackConfig {
    pub fn validate(&self, texture: &TextureMap) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.lambda_l2 >= 0.0 && self.lambda_l2.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda_l2 must be nonnegative, got {}", self.lambda_l2)));
        }
        let f = self.termination.val_fool_rate;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidConfig(format!("val_fool_rate must be in (0, 1], got {f}")));
        }
        if self.stall_window == 0 {
            return Err(Error::InvalidConfig("stall_window must be positive".into()));
        }
        self.detector.validate()?;
        if let Some(region) = &self.region_mask {
            if region.width() != texture.width() || region.height() != texture.height() {
                return Err(Error::shape(
                    format!("{}x{} region mask", texture.width(), texture.height()),
                    format!("{}x{}", region.width(), region.height()),
                ));
            }
            if !region.is_subset_of(&texture.mask) {
                return Err(Error::InvalidConfig("region mask must lie inside the texture mask".into()));
            }
        }
        Ok(())
    }

    /// Texels that the step may change.
    pub fn active_mask(&self, texture: &TextureMap) -> Mask {
        match &self.region_mask {
            Some(r) => r.intersect(&texture.mask),
            None => texture.mask.clone(),
        }
    }
}

/// Elementwise sign, with exact zeros (and NaN) mapped to 0.
pub fn descent_direction(gradient: &Image) -> Image {
    let mut d = gradient.clone();
    d.data_mut().iter_mut().for_each(|v| {
        *v = if *v > 0.0 {
            1.0
        } else if *v < 0.0 {
            -1.0
        } else {
            0.0
        }
    });
    d
}

/// `T ← clip(T − ε·d)` on active texels; every other texel is untouched.
pub fn step(texture: &TextureMap, direction: &Image, config: &AttackConfig) -> Result<TextureMap> {
    if !direction.same_shape(&texture.pixels) {
        return Err(Error::shape(format!("{:?}", texture.pixels.shape()), format!("{:?}", direction.shape())));
    }
    let active = config.active_mask(texture);
    let mut out = texture.clone();
    let c = texture.channels();
    let eps = config.epsilon;
    for y in 0..texture.height() {
        for x in 0..texture.width() {
            if !active.get(x, y) {
                continue;
            }
            let i = texture.pixels.index(x, y, 0);
            for k in i..i + c {
                let v = out.pixels.data()[k] - eps * direction.data()[k];
                out.pixels.data_mut()[k] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

fn reference_of(texture: &TextureMap) -> Result<&Image> {
    texture
        .reference()
        .ok_or_else(|| Error::InvalidConfig("attack textures need a reference pattern T0".into()))
}

/// `λ Σ (T − T0)²` over texels in the texture mask.
pub fn penalty(texture: &TextureMap, lambda: f64) -> Result<f64> {
    Ok(lambda * squared_distance(texture)?)
}

/// `Σ (T − T0)²` over texels in the texture mask.
pub fn squared_distance(texture: &TextureMap) -> Result<f64> {
    let r = reference_of(texture)?;
    let c = texture.channels();
    let mut sum = 0.0;
    for (i, (a, b)) in texture.pixels.data().iter().zip(r.data()).enumerate() {
        let t = i / c;
        if texture.mask.get(t % texture.width(), t / texture.width()) {
            sum += (a - b) * (a - b);
        }
    }
    Ok(sum)
}

/// Gradient of the penalty: `2λ(T − T0)` inside the mask, zero outside.
pub fn penalty_gradient(texture: &TextureMap, lambda: f64) -> Result<Image> {
    let r = reference_of(texture)?;
    let c = texture.channels();
    let mut g = texture.pixels.zeros_like();
    for (i, v) in g.data_mut().iter_mut().enumerate() {
        let t = i / c;
        if texture.mask.get(t % texture.width(), t / texture.width()) {
            *v = 2.0 * lambda * (texture.pixels.data()[i] - r.data()[i]);
        }
    }
    Ok(g)
}

/// One registered frame with its precomputed warp.
#[derive(Clone, Debug)]
pub struct PreparedView {
    pub frame: Frame,
    pub view: ViewMap,
    plan: WarpPlan,
}

impl PreparedView {
    pub fn new(frame: Frame, view: ViewMap, texture_mask: &Mask) -> Self {
        let plan = WarpPlan::new(&view, texture_mask, frame.image.width(), frame.image.height());
        Self { frame, view, plan }
    }

    pub fn render(&self, texture: &TextureMap) -> Result<(Image, Vec<bool>)> {
        self.plan.render(&self.frame.image, texture)
    }

    pub fn plan(&self) -> &WarpPlan {
        &self.plan
    }
}

/// Registers `frames` with `views` against `texture`'s mask. Fails before any
/// optimization if a view cannot be used.
pub fn prepare_views(frames: &[Frame], views: &[ViewMap], texture: &TextureMap) -> Result<Vec<PreparedView>> {
    if frames.len() != views.len() {
        return Err(Error::shape(format!("{} views", frames.len()), views.len()));
    }
    frames
        .iter()
        .zip(views)
        .map(|(f, v)| {
            let det = v.homography.determinant();
            if !(det.abs() > crate::registration::INVERTIBILITY_TOLERANCE) {
                return Err(Error::SingularHomography { det });
            }
            if f.image.channels() != texture.channels() {
                return Err(Error::shape(format!("{} channels", texture.channels()), f.image.channels()));
            }
            Ok(PreparedView::new(f.clone(), *v, &texture.mask))
        })
        .collect()
}

/// Φ and its pieces at one texture, with the box sets used.
#[derive(Clone, Debug)]
pub struct ObjectiveEvaluation {
    pub value: f64,
    /// Mean over frames of the aggregated box scores.
    pub detection_term: f64,
    pub penalty: f64,
    /// Selected proposal indices per frame.
    pub box_sets: Vec<Vec<usize>>,
    /// `∇Φ` with the box sets frozen; `None` when not requested.
    pub gradient: Option<Image>,
}

fn aggregate(scores: &[f64], aggregation: Aggregation) -> f64 {
    match aggregation {
        Aggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        Aggregation::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Evaluates Φ, selecting boxes on each composited frame unless `box_sets`
/// pins them.
pub fn evaluate_objective(
    texture: &TextureMap,
    views: &[PreparedView],
    model: &dyn Detector,
    config: &AttackConfig,
    box_sets: Option<&[Vec<usize>]>,
    with_gradient: bool,
) -> Result<ObjectiveEvaluation> {
    if views.is_empty() {
        return Err(Error::Empty("training frames"));
    }
    if let Some(sets) = box_sets {
        if sets.len() != views.len() {
            return Err(Error::shape(format!("{} box sets", views.len()), sets.len()));
        }
    }
    let target = config.detector.target_class;
    let mut sets = Vec::with_capacity(views.len());
    let mut grads = Vec::with_capacity(views.len());
    let mut detection_sum = 0.0;
    for (i, pv) in views.iter().enumerate() {
        let (image, saturated) = pv.render(texture)?;
        let pass = model.forward(&image)?;
        let subset = match box_sets {
            Some(s) => s[i].clone(),
            None => select_boxes(pass.proposals(), target, config.detector.nms_iou_threshold, &config.boxes),
        };
        if subset.is_empty() {
            if with_gradient {
                grads.push(texture.pixels.zeros_like());
            }
        } else if with_gradient {
            let (value, mut g) = pass.score_gradient(&subset, target, config.aggregation)?;
            detection_sum += value;
            for (v, &s) in g.data_mut().iter_mut().zip(&saturated) {
                if s {
                    *v = 0.0;
                }
            }
            grads.push(pv.plan.backproject(&g, texture)?);
        } else {
            let scores: Vec<f64> = subset.iter().map(|&b| pass.proposals()[b].score(target)).collect();
            detection_sum += aggregate(&scores, config.aggregation);
        }
        sets.push(subset);
    }
    let detection_term = detection_sum / views.len() as f64;
    let pen = penalty(texture, config.lambda_l2)?;
    let gradient = if with_gradient {
        let mut g = merge_gradients(&grads)?;
        if config.lambda_l2 > 0.0 {
            let pg = penalty_gradient(texture, config.lambda_l2)?;
            g.data_mut().iter_mut().zip(pg.data()).for_each(|(a, b)| *a += b);
        }
        Some(g)
    } else {
        None
    };
    Ok(ObjectiveEvaluation {
        value: detection_term + pen,
        detection_term,
        penalty: pen,
        box_sets: sets,
        gradient,
    })
}

/// Φ(T) over registered training frames.
pub fn objective(
    texture: &TextureMap,
    frames: &[Frame],
    views: &[ViewMap],
    model: &dyn Detector,
    config: &AttackConfig,
) -> Result<f64> {
    let prepared = prepare_views(frames, views, texture)?;
    Ok(evaluate_objective(texture, &prepared, model, config, None, false)?.value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    /// The validation fool rate exceeded the configured threshold.
    ValidationCriterion,
    MaxIterations,
    /// Φ stopped changing, or became non-finite.
    Stalled,
}

/// One optimizer step. `objective` and its parts are measured at the texture
/// the step started from; the distance and validation rates after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub detection_term: f64,
    pub penalty: f64,
    pub boxes: usize,
    pub l2_distance: f64,
    pub linf_distance: f64,
    pub val_fool_rate: Option<f64>,
    pub val_mislabel_rate: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    pub final_texture: TextureMap,
    pub history: Vec<IterationRecord>,
    pub termination: TerminationReason,
    pub config: AttackConfig,
}

/// `max |T − T0|` over all texels.
pub fn linf_distance(texture: &TextureMap) -> Result<f64> {
    Ok(texture.pixels.max_abs_diff(reference_of(texture)?))
}
