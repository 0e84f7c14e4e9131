use serde::{Deserialize, Serialize};

use super::{
    descent_direction, evaluate_objective, linf_distance, prepare_views, squared_distance, step, AttackConfig,
    AttackResult, IterationRecord, PreparedView, TerminationReason, STALL_TOLERANCE,
};
use crate::detector::{frame_outcome, Detector, FrameOutcome};
use crate::error::{Error, Result};
use crate::geometry::{clamp_polygon, rasterize_polygon, Rect};
use crate::image::{Image, Mask};
use crate::registration::{Frame, TextureMap, ViewMap};

/// Fool and mislabel rates over validation views, `None` when there are none.
fn validation_rates(
    texture: &TextureMap,
    val: &[PreparedView],
    model: &dyn Detector,
    config: &AttackConfig,
) -> Result<(Option<f64>, Option<f64>)> {
    if val.is_empty() {
        return Ok((None, None));
    }
    let mut fooled = 0usize;
    let mut mislabeled = 0usize;
    for pv in val {
        let (image, _) = pv.render(texture)?;
        let pass = model.forward(&image)?;
        let object = Rect::bounding(&pv.frame.object_polygon).ok_or(Error::EmptyPolygon)?;
        let outcome = frame_outcome(pass.proposals(), &object, &config.detector);
        fooled += !outcome.detected as usize;
        mislabeled += outcome.mislabeled_as.is_some() as usize;
    }
    let n = val.len() as f64;
    Ok((Some(fooled as f64 / n), Some(mislabeled as f64 / n)))
}

fn with_reference(initial: &TextureMap) -> Result<TextureMap> {
    match initial.reference() {
        Some(_) => Ok(initial.clone()),
        None => TextureMap::perturbable(initial.pixels.clone(), initial.mask.clone()),
    }
}

/// Runs the minimization from `initial` (its reference pattern, or its pixels
/// when it has none, is T0).
pub fn run_attack(
    train: &[PreparedView],
    val: &[PreparedView],
    model: &dyn Detector,
    initial: &TextureMap,
    config: &AttackConfig,
) -> Result<AttackResult> {
    run_attack_with(train, val, model, initial, config, &mut |_, _| Ok(()))
}

/// [`run_attack`] calling `observer` after every step with the new record
/// and texture.
pub fn run_attack_with(
    train: &[PreparedView],
    val: &[PreparedView],
    model: &dyn Detector,
    initial: &TextureMap,
    config: &AttackConfig,
    observer: &mut dyn FnMut(&IterationRecord, &TextureMap) -> Result<()>,
) -> Result<AttackResult> {
    config.validate(initial)?;
    if train.is_empty() {
        return Err(Error::Empty("training frames"));
    }
    let mut texture = with_reference(initial)?;
    let mut history = Vec::new();
    let mut termination = TerminationReason::MaxIterations;
    let mut previous: Option<f64> = None;
    let mut flat_steps = 0usize;

    for iteration in 0..config.termination.max_iterations {
        let eval = evaluate_objective(&texture, train, model, config, None, true)?;
        if !eval.value.is_finite() {
            termination = TerminationReason::Stalled;
            break;
        }
        let gradient = eval.gradient.as_ref().expect("gradient requested");
        texture = step(&texture, &descent_direction(gradient), config)?;
        let (val_fool_rate, val_mislabel_rate) = validation_rates(&texture, val, model, config)?;
        let record = IterationRecord {
            iteration,
            objective: eval.value,
            detection_term: eval.detection_term,
            penalty: eval.penalty,
            boxes: eval.box_sets.iter().map(Vec::len).sum(),
            l2_distance: squared_distance(&texture)?.sqrt(),
            linf_distance: linf_distance(&texture)?,
            val_fool_rate,
            val_mislabel_rate,
        };
        observer(&record, &texture)?;
        history.push(record);

        if val_fool_rate.is_some_and(|f| f > config.termination.val_fool_rate) {
            termination = TerminationReason::ValidationCriterion;
            break;
        }
        match previous {
            Some(p) if (eval.value - p).abs() <= STALL_TOLERANCE => flat_steps += 1,
            _ => flat_steps = 0,
        }
        previous = Some(eval.value);
        if flat_steps >= config.stall_window {
            termination = TerminationReason::Stalled;
            break;
        }
    }
    Ok(AttackResult {
        final_texture: texture,
        history,
        termination,
        config: config.clone(),
    })
}

/// Which pixels a single-image attack may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingleImageRegion {
    WholeImage,
    Object,
}

#[derive(Clone, Debug)]
pub struct SingleImageOutcome {
    pub image: Image,
    /// No target-class detection survives on `image`.
    pub success: bool,
    pub outcome: FrameOutcome,
    pub linf: f64,
    pub iterations: usize,
    pub termination: TerminationReason,
}

/// Attacks one frame directly: the frame is its own texture under the
/// identity view, and serves as both training and validation set.
pub fn single_image_attack(
    frame: &Frame,
    model: &dyn Detector,
    config: &AttackConfig,
    region: SingleImageRegion,
) -> Result<SingleImageOutcome> {
    let img = &frame.image;
    let (w, h) = (img.width(), img.height());
    let mask = match region {
        SingleImageRegion::WholeImage => Mask::full(w, h),
        SingleImageRegion::Object => rasterize_polygon(&clamp_polygon(&frame.object_polygon, w, h), w, h),
    };
    let texture = TextureMap::perturbable(img.clone(), mask)?;
    let views = prepare_views(std::slice::from_ref(frame), &[ViewMap::identity()], &texture)?;
    let result = run_attack(&views, &views, model, &texture, config)?;
    let (image, _) = views[0].render(&result.final_texture)?;
    let object = Rect::bounding(&frame.object_polygon).ok_or(Error::EmptyPolygon)?;
    let outcome = frame_outcome(model.forward(&image)?.proposals(), &object, &config.detector);
    Ok(SingleImageOutcome {
        linf: image.max_abs_diff(img),
        success: !outcome.detected,
        outcome,
        image,
        iterations: result.history.len(),
        termination: result.termination,
    })
}
