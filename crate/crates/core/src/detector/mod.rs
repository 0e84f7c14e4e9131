//! Differentiable detectors.
//!
//! A [`Detector`] produces class-scored proposals for an image and can
//! differentiate an aggregate of one class's proposal scores with respect to
//! the input pixels. Box geometry and proposal selection are held fixed while
//! differentiating: only classification scores carry gradient.
//!
//! Two small trainable architectures are provided so the attack pipeline can
//! be exercised end to end on a CPU: a one-stage [`GridDetector`] and a
//! proposal-then-classify [`TwoStageDetector`].

mod checkpoint;
mod grid;
pub mod nn;
mod train;
mod two_stage;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use grid::{GridArchitecture, GridDetector};
pub use train::{
    clean_detection_rate, train_toy_detector, GroundTruth, TrainOptions, TrainingReport,
    TrainingSample,
};
pub use two_stage::{TwoStageArchitecture, TwoStageDetector};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::image::Image;

pub const BACKGROUND: usize = 0;

/// Default class list of the toy detectors.
pub fn default_classes() -> Vec<String> {
    vec![
        "background".to_string(),
        "stop_sign".to_string(),
        "warning_sign".to_string(),
    ]
}

/// One proposal: rectangle, per-class probabilities (background included)
/// and objectness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub rect: Rect,
    pub class_scores: Vec<f64>,
    pub objectness: f64,
    /// Index of this proposal in the forward pass that produced it.
    pub proposal: usize,
}

impl DetectionBox {
    pub fn score(&self, class: usize) -> f64 {
        self.class_scores.get(class).copied().unwrap_or(0.0)
    }

    /// Highest-scoring class, background included.
    pub fn label(&self) -> usize {
        self.class_scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(BACKGROUND)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub nms_iou_threshold: f64,
    pub confidence_threshold: f64,
    pub target_class: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            nms_iou_threshold: 0.3,
            confidence_threshold: 0.6,
            target_class: 1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nms_iou_threshold > 0.0 && self.nms_iou_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "nms_iou_threshold must be in (0, 1], got {}",
                self.nms_iou_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::InvalidConfig(format!(
                "confidence_threshold must be in [0, 1], got {}",
                self.confidence_threshold
            )));
        }
        Ok(())
    }
}

/// How per-box target scores are combined into one scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

/// Serializable description of a detector architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Grid(GridArchitecture),
    TwoStage(TwoStageArchitecture),
}

impl Architecture {
    pub fn grid() -> Self {
        Architecture::Grid(GridArchitecture::default())
    }

    pub fn two_stage() -> Self {
        Architecture::TwoStage(TwoStageArchitecture::default())
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Architecture::Grid(a) => a.parameter_count(),
            Architecture::TwoStage(a) => a.parameter_count(),
        }
    }
}

/// Result of one forward pass, kept so the gradient can reuse activations.
pub trait DetectorPass {
    fn proposals(&self) -> &[DetectionBox];

    /// Value and input gradient of the aggregated `class` score over the
    /// proposals listed in `subset`.
    fn score_gradient(
        &self,
        subset: &[usize],
        class: usize,
        aggregation: Aggregation,
    ) -> Result<(f64, Image)>;
}

pub trait Detector: Send + Sync {
    fn id(&self) -> &str;
    fn classes(&self) -> &[String];
    fn architecture(&self) -> Architecture;
    fn forward<'a>(&'a self, image: &Image) -> Result<Box<dyn DetectorPass + 'a>>;
}

/// Greedy non-maximum suppression over `boxes` already sorted by descending
/// score. Returns the kept positions.
pub fn nms_sorted(rects: &[Rect], iou_threshold: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for (i, r) in rects.iter().enumerate() {
        if keep.iter().all(|&k| rects[k].iou(r) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// Sorts boxes by descending `class` score (stable on ties) and suppresses
/// overlaps.
pub fn nms(mut boxes: Vec<DetectionBox>, class: usize, iou_threshold: f64) -> Vec<DetectionBox> {
    boxes.sort_by(|a, b| b.score(class).total_cmp(&a.score(class)));
    let rects: Vec<Rect> = boxes.iter().map(|b| b.rect).collect();
    let keep = nms_sorted(&rects, iou_threshold);
    let mut keep_flags = vec![false; boxes.len()];
    for k in keep {
        keep_flags[k] = true;
    }
    boxes
        .into_iter()
        .zip(keep_flags)
        .filter_map(|(b, k)| k.then_some(b))
        .collect()
}

/// Thresholded, suppressed detections of `config.target_class` among
/// `proposals`, highest score first.
pub fn detections_from(proposals: &[DetectionBox], config: &DetectorConfig) -> Vec<DetectionBox> {
    detections_of_class(proposals, config.target_class, config)
}

pub fn detections_of_class(
    proposals: &[DetectionBox],
    class: usize,
    config: &DetectorConfig,
) -> Vec<DetectionBox> {
    let candidates: Vec<DetectionBox> = proposals
        .iter()
        .filter(|b| b.score(class) >= config.confidence_threshold)
        .cloned()
        .collect();
    nms(candidates, class, config.nms_iou_threshold)
}

pub fn detect(model: &dyn Detector, image: &Image, config: &DetectorConfig) -> Result<Vec<DetectionBox>> {
    let pass = model.forward(image)?;
    Ok(detections_from(pass.proposals(), config))
}

/// What one detection pass made of a frame whose object box is known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameOutcome {
    /// Some target-class detection survived the thresholds.
    pub detected: bool,
    /// Best IoU between a target-class detection and the object box.
    pub best_iou: f64,
    /// When not detected: the highest-scoring other non-background class
    /// detected over the object (IoU ≥ 0.5).
    pub mislabeled_as: Option<usize>,
}

pub fn frame_outcome(proposals: &[DetectionBox], object: &Rect, config: &DetectorConfig) -> FrameOutcome {
    let dets = detections_from(proposals, config);
    let best_iou = dets.iter().map(|d| d.rect.iou(object)).fold(0.0, f64::max);
    let detected = !dets.is_empty();
    let classes = proposals.first().map_or(0, |b| b.class_scores.len());
    let mislabeled_as = if detected {
        None
    } else {
        (0..classes)
            .filter(|&c| c != BACKGROUND && c != config.target_class)
            .filter_map(|c| {
                detections_of_class(proposals, c, config)
                    .into_iter()
                    .find(|d| d.rect.iou(object) >= 0.5)
                    .map(|d| (c, d.score(c)))
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
    };
    FrameOutcome {
        detected,
        best_iou,
        mislabeled_as,
    }
}

/// Every proposal with its `target_class` score, before thresholding.
pub fn class_score_map(model: &dyn Detector, image: &Image, target_class: usize) -> Result<Vec<(Rect, f64)>> {
    let pass = model.forward(image)?;
    Ok(pass
        .proposals()
        .iter()
        .map(|b| (b.rect, b.score(target_class)))
        .collect())
}

/// Gradient of the aggregated target score over `box_subset` (proposal
/// indices of the forward pass on `image`).
pub fn input_gradient(
    model: &dyn Detector,
    image: &Image,
    box_subset: &[usize],
    target_class: usize,
    aggregation: Aggregation,
) -> Result<Image> {
    if box_subset.is_empty() {
        return Err(Error::Empty("box subset"));
    }
    let pass = model.forward(image)?;
    Ok(pass.score_gradient(box_subset, target_class, aggregation)?.1)
}

/// Which proposals make up the box set the attack differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoxSelection {
    /// Use suppressed detections rather than raw proposals.
    pub post_nms: bool,
    /// Minimum target-class score for a proposal to enter the set.
    pub min_score: f64,
}

impl Default for BoxSelection {
    fn default() -> Self {
        Self {
            post_nms: true,
            min_score: 0.1,
        }
    }
}

/// Proposal indices forming the target-class box set.
pub fn select_boxes(
    proposals: &[DetectionBox],
    target_class: usize,
    nms_iou_threshold: f64,
    selection: &BoxSelection,
) -> Vec<usize> {
    let config = DetectorConfig {
        nms_iou_threshold,
        confidence_threshold: selection.min_score,
        target_class,
    };
    if selection.post_nms {
        detections_from(proposals, &config)
            .into_iter()
            .map(|b| b.proposal)
            .collect()
    } else {
        proposals
            .iter()
            .filter(|b| b.score(target_class) >= selection.min_score)
            .map(|b| b.proposal)
            .collect()
    }
}

/// Either toy architecture, behind one concrete type for checkpoints.
#[derive(Clone, Debug)]
pub enum DetectorModel {
    Grid(GridDetector),
    TwoStage(TwoStageDetector),
}

impl DetectorModel {
    pub fn new(id: impl Into<String>, architecture: Architecture, classes: Vec<String>, seed: u64) -> Self {
        match architecture {
            Architecture::Grid(a) => DetectorModel::Grid(GridDetector::new(id, a, classes, seed)),
            Architecture::TwoStage(a) => {
                DetectorModel::TwoStage(TwoStageDetector::new(id, a, classes, seed))
            }
        }
    }

    pub fn parameters(&self) -> &[nn::Tensor] {
        match self {
            DetectorModel::Grid(d) => &d.params,
            DetectorModel::TwoStage(d) => &d.params,
        }
    }

    pub(crate) fn parameters_mut(&mut self) -> &mut Vec<nn::Tensor> {
        match self {
            DetectorModel::Grid(d) => &mut d.params,
            DetectorModel::TwoStage(d) => &mut d.params,
        }
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        match self {
            DetectorModel::Grid(d) => d.id = id.into(),
            DetectorModel::TwoStage(d) => d.id = id.into(),
        }
    }

    fn inner(&self) -> &dyn Detector {
        match self {
            DetectorModel::Grid(d) => d,
            DetectorModel::TwoStage(d) => d,
        }
    }

    pub(crate) fn sample_loss(
        &self,
        sample: &TrainingSample,
        rng: &mut rand_chacha::ChaCha8Rng,
        grads: &mut [Vec<f64>],
    ) -> f64 {
        match self {
            DetectorModel::Grid(d) => d.sample_loss(sample, grads),
            DetectorModel::TwoStage(d) => d.sample_loss(sample, rng, grads),
        }
    }
}

impl Detector for DetectorModel {
    fn id(&self) -> &str {
        self.inner().id()
    }

    fn classes(&self) -> &[String] {
        self.inner().classes()
    }

    fn architecture(&self) -> Architecture {
        self.inner().architecture()
    }

    fn forward<'a>(&'a self, image: &Image) -> Result<Box<dyn DetectorPass + 'a>> {
        self.inner().forward(image)
    }
}

/// Cell geometry shared by both architectures' dense heads.
pub(crate) fn decode_cell_box(
    gx: usize,
    gy: usize,
    t: [f64; 4],
    stride: f64,
    anchor: f64,
    width: f64,
    height: f64,
) -> Rect {
    let (cx, cy) = cell_center(gx, gy, stride);
    let w = anchor * t[2].clamp(-3.0, 3.0).exp();
    let h = anchor * t[3].clamp(-3.0, 3.0).exp();
    Rect::from_center(cx + stride * t[0], cy + stride * t[1], w, h).clamped(width, height, 1.0)
}

/// Jacobian of [`decode_cell_box`]: row `k` holds the derivatives of
/// `[x_min, y_min, x_max, y_max][k]` with respect to `t`.
pub(crate) fn decode_cell_box_jacobian(
    gx: usize,
    gy: usize,
    t: [f64; 4],
    stride: f64,
    anchor: f64,
    width: f64,
    height: f64,
) -> [[f64; 4]; 4] {
    let (cx, cy) = cell_center(gx, gy, stride);
    let live = |v: f64| if v > -3.0 && v < 3.0 { 1.0 } else { 0.0 };
    let w = anchor * t[2].clamp(-3.0, 3.0).exp();
    let h = anchor * t[3].clamp(-3.0, 3.0).exp();
    let (ccx, ccy) = (cx + stride * t[0], cy + stride * t[1]);
    let dw = 0.5 * w * live(t[2]);
    let dh = 0.5 * h * live(t[3]);
    // Unclamped corners and their rows.
    let x = [(ccx - 0.5 * w, [stride, 0.0, -dw, 0.0]), (ccx + 0.5 * w, [stride, 0.0, dw, 0.0])];
    let y = [(ccy - 0.5 * h, [0.0, stride, 0.0, -dh]), (ccy + 0.5 * h, [0.0, stride, 0.0, dh])];
    let axis = |pair: [(f64, [f64; 4]); 2], limit: f64| -> [[f64; 4]; 2] {
        let clip = |(v, row): (f64, [f64; 4])| -> (f64, [f64; 4]) {
            if v > 0.0 && v < limit {
                (v, row)
            } else {
                (v.clamp(0.0, limit), [0.0; 4])
            }
        };
        let (lo, hi) = (clip(pair[0]), clip(pair[1]));
        if hi.0 - lo.0 < 1.0 {
            let c = 0.5 * (lo.0 + hi.0);
            let row = if c > 0.5 && c < limit - 0.5 {
                std::array::from_fn(|j| 0.5 * (lo.1[j] + hi.1[j]))
            } else {
                [0.0; 4]
            };
            [row, row]
        } else {
            [lo.1, hi.1]
        }
    };
    let [xl, xh] = axis(x, width);
    let [yl, yh] = axis(y, height);
    [xl, yl, xh, yh]
}

pub(crate) fn cell_center(gx: usize, gy: usize, stride: f64) -> (f64, f64) {
    (
        gx as f64 * stride + 0.5 * (stride - 1.0),
        gy as f64 * stride + 0.5 * (stride - 1.0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(rect: Rect, s: f64, i: usize) -> DetectionBox {
        DetectionBox {
            rect,
            class_scores: vec![1.0 - s, s, 0.0],
            objectness: s,
            proposal: i,
        }
    }

    #[test]
    fn duplicate_proposals_keep_one() {
        let r = Rect::new(10.0, 10.0, 50.0, 50.0);
        let kept = nms(vec![boxed(r, 0.7, 0), boxed(r, 0.9, 1)], 1, 0.3);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].proposal, 1);
    }

    #[test]
    fn detections_respect_thresholds_and_order() {
        let props = vec![
            boxed(Rect::new(0.0, 0.0, 10.0, 10.0), 0.65, 0),
            boxed(Rect::new(100.0, 0.0, 110.0, 10.0), 0.95, 1),
            boxed(Rect::new(1.0, 1.0, 11.0, 11.0), 0.8, 2),
            boxed(Rect::new(50.0, 50.0, 60.0, 60.0), 0.5, 3),
        ];
        let cfg = DetectorConfig::default();
        let d = detections_from(&props, &cfg);
        let ids: Vec<usize> = d.iter().map(|b| b.proposal).collect();
        assert_eq!(ids, vec![1, 2]);
        let post = select_boxes(&props, 1, 0.3, &BoxSelection { post_nms: true, min_score: 0.6 });
        assert_eq!(post, ids);
        let pre = select_boxes(&props, 1, 0.3, &BoxSelection { post_nms: false, min_score: 0.6 });
        assert_eq!(pre, vec![0, 1, 2]);
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig::default().validate().is_ok());
        let bad = DetectorConfig {
            nms_iou_threshold: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
