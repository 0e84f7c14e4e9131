//! Detection-rate reports over split × distance × condition × detector ×
//! defense × attack, cross-detector transfer, and the success-factor
//! regression.

mod logistic;
mod report;

pub use logistic::{
    cross_validate_strength, encode_factors, fit_l1_logistic, fit_success_factors, logistic_objective, FactorRecord,
    LogisticFit, LogisticOptions, SuccessFactors, DEFAULT_STRENGTH_GRID,
};
pub use report::{
    draw_boxes, parse_csv, render_grid, render_report, to_csv, RenderedReport, CSV_HEADER, GRID_FILE, TABLE_FILE,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Distance, Split};
use crate::defenses::DefenseSpec;
use crate::detector::{frame_outcome, Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::registration::{composite, Frame, TextureMap, ViewMap};

/// Attack id used for unattacked frames.
pub const CLEAN_ATTACK_ID: &str = "clean";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub split: Split,
    pub distance: Distance,
    pub condition: String,
    pub detector: String,
    pub defense: String,
    pub attack: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCounts {
    pub detected: usize,
    pub total: usize,
}

impl CellCounts {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.detected as f64 / self.total as f64
        }
    }
}

/// Outcome of one (frame, detector, defense) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEvaluation {
    pub key: CellKey,
    pub sequence_id: String,
    pub frame_index: usize,
    pub detected: bool,
    pub best_iou: f64,
    /// Class name the object was detected as instead, when not detected.
    pub mislabeled_as: Option<String>,
}

impl FrameEvaluation {
    pub fn fooled(&self) -> bool {
        !self.detected
    }
}

/// Per-frame records; every count is derived from them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionRateReport {
    pub records: Vec<FrameEvaluation>,
}

impl DetectionRateReport {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn cells(&self) -> BTreeMap<CellKey, CellCounts> {
        let mut cells: BTreeMap<CellKey, CellCounts> = BTreeMap::new();
        for r in &self.records {
            let c = cells.entry(r.key.clone()).or_default();
            c.total += 1;
            c.detected += r.detected as usize;
        }
        cells
    }

    /// Sums the cells selected by `keep`.
    pub fn totals(&self, keep: impl Fn(&CellKey) -> bool) -> CellCounts {
        self.records
            .iter()
            .filter(|r| keep(&r.key))
            .fold(CellCounts::default(), |mut c, r| {
                c.total += 1;
                c.detected += r.detected as usize;
                c
            })
    }

    pub fn merge(&mut self, other: DetectionRateReport) {
        self.records.extend(other.records);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSpec {
    pub detector: DetectorConfig,
    /// Report key for the texture being evaluated.
    pub attack_id: String,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            attack_id: CLEAN_ATTACK_ID.into(),
        }
    }
}

/// Composites `texture` (when given) into every frame, applies each defense
/// and runs each detector. Records come out in frame, defense, detector
/// order.
pub fn evaluate(
    texture: Option<&TextureMap>,
    frames: &[Frame],
    views: &[ViewMap],
    detectors: &[&dyn Detector],
    defenses: &[DefenseSpec],
    spec: &EvaluationSpec,
) -> Result<DetectionRateReport> {
    if texture.is_some() && frames.len() != views.len() {
        return Err(Error::shape(format!("{} views", frames.len()), views.len()));
    }
    spec.detector.validate()?;
    defenses.iter().try_for_each(DefenseSpec::validate)?;
    let mut records = Vec::with_capacity(frames.len() * detectors.len() * defenses.len());
    for (i, frame) in frames.iter().enumerate() {
        let image = match texture {
            Some(t) => composite(&frame.image, t, &views[i])?,
            None => frame.image.clone(),
        };
        let object = Rect::bounding(&frame.object_polygon).ok_or(Error::EmptyPolygon)?;
        for defense in defenses {
            let input = defense.apply(&image)?;
            for model in detectors {
                let pass = model.forward(&input)?;
                let outcome = frame_outcome(pass.proposals(), &object, &spec.detector);
                records.push(FrameEvaluation {
                    key: CellKey {
                        split: frame.meta.split,
                        distance: frame.meta.distance,
                        condition: frame.meta.condition.clone(),
                        detector: model.id().to_string(),
                        defense: defense.label(),
                        attack: spec.attack_id.clone(),
                    },
                    sequence_id: frame.meta.sequence_id.clone(),
                    frame_index: frame.meta.index,
                    detected: outcome.detected,
                    best_iou: outcome.best_iou,
                    mislabeled_as: outcome
                        .mislabeled_as
                        .map(|c| model.classes().get(c).cloned().unwrap_or_else(|| c.to_string())),
                });
            }
        }
    }
    Ok(DetectionRateReport { records })
}

/// Evaluates a texture on the detector it was optimized against and on a
/// second one, side by side. A target equal to the source evaluates once.
pub fn transfer_evaluate(
    texture: &TextureMap,
    frames: &[Frame],
    views: &[ViewMap],
    source: &dyn Detector,
    target: &dyn Detector,
    defense: DefenseSpec,
    spec: &EvaluationSpec,
) -> Result<DetectionRateReport> {
    let detectors: Vec<&dyn Detector> = if source.id() == target.id() {
        vec![source]
    } else {
        vec![source, target]
    };
    evaluate(Some(texture), frames, views, &detectors, &[defense], spec)
}
