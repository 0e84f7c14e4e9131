use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{self, Adam};
use super::{detect, Architecture, DetectorConfig, DetectorModel};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class: usize,
    pub rect: Rect,
}

/// A training image kept in 8-bit form to bound memory use.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    pub objects: Vec<GroundTruth>,
}

impl TrainingSample {
    pub fn new(image: &Image, objects: Vec<GroundTruth>) -> Self {
        Self {
            width: image.width(),
            height: image.height(),
            pixels: image.to_u8(),
            objects,
        }
    }

    pub fn image(&self) -> Image {
        Image::from_u8(self.width, self.height, 3, &self.pixels).expect("consistent sample")
    }

    pub fn has_class(&self, class: usize) -> bool {
        self.objects.iter().any(|o| o.class == class)
    }
}

pub(crate) enum CellTarget {
    Background,
    Ignore,
    Positive { class: usize, target: [f64; 4] },
}

/// Cells whose centers fall in the central part of an object are positives
/// for it; the rest of the object's box is ignored; everything else is
/// background.
pub(crate) fn assign_cells(
    objects: &[GroundTruth],
    grid_w: usize,
    grid_h: usize,
    stride: f64,
    anchor: f64,
) -> Vec<CellTarget> {
    let mut out = Vec::with_capacity(grid_w * grid_h);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let (cx, cy) = super::cell_center(gx, gy, stride);
            let mut best: Option<(f64, &GroundTruth)> = None;
            let mut inside_any = false;
            for o in objects {
                let [ox, oy] = o.rect.center();
                let (dx, dy) = ((cx - ox).abs(), (cy - oy).abs());
                let rx = (0.25 * o.rect.width()).max(0.5 * stride);
                let ry = (0.25 * o.rect.height()).max(0.5 * stride);
                if dx <= rx && dy <= ry {
                    let d = dx * dx + dy * dy;
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, o));
                    }
                } else if cx > o.rect.x_min && cx < o.rect.x_max && cy > o.rect.y_min && cy < o.rect.y_max {
                    inside_any = true;
                }
            }
            out.push(match best {
                Some((_, o)) => {
                    let [ox, oy] = o.rect.center();
                    CellTarget::Positive {
                        class: o.class,
                        target: [
                            (ox - cx) / stride,
                            (oy - cy) / stride,
                            (o.rect.width().max(1.0) / anchor).ln(),
                            (o.rect.height().max(1.0) / anchor).ln(),
                        ],
                    }
                }
                None if inside_any => CellTarget::Ignore,
                None => CellTarget::Background,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub id: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of epochs after which the learning rate drops tenfold.
    pub decay_at: f64,
    /// Training fails unless this fraction of training images with a
    /// target object ends up detected.
    pub min_train_detection_rate: f64,
    pub config: DetectorConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            id: "grid".into(),
            seed: 0,
            epochs: 12,
            batch_size: 8,
            learning_rate: 3e-3,
            decay_at: 0.75,
            min_train_detection_rate: 0.8,
            config: DetectorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epoch_losses: Vec<f64>,
    pub train_detection_rate: f64,
    pub parameter_count: usize,
}

/// Fraction of samples containing `config.target_class` where some target
/// detection overlaps a target object with IoU ≥ 0.5.
pub fn clean_detection_rate(
    model: &DetectorModel,
    samples: &[TrainingSample],
    config: &DetectorConfig,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in samples.iter().filter(|s| s.has_class(config.target_class)) {
        total += 1;
        let dets = detect(model, &s.image(), config)?;
        let hit = dets.iter().any(|d| {
            s.objects
                .iter()
                .filter(|o| o.class == config.target_class)
                .any(|o| o.rect.iou(&d.rect) >= 0.5)
        });
        hits += hit as usize;
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Trains a toy detector with Adam. Deterministic for a fixed seed.
pub fn train_toy_detector(
    dataset: &[TrainingSample],
    architecture: Architecture,
    classes: Vec<String>,
    options: &TrainOptions,
) -> Result<(DetectorModel, TrainingReport)> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if options.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    options.config.validate()?;
    let mut model = DetectorModel::new(options.id.clone(), architecture, classes, options.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x5eed_da7a);
    let mut adam = Adam::new(model.parameters(), options.learning_rate);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(options.epochs);
    let decay_epoch = (options.decay_at * options.epochs as f64).round() as usize;

    for epoch in 0..options.epochs {
        if epoch == decay_epoch {
            adam.learning_rate = options.learning_rate * 0.1;
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(options.batch_size) {
            let mut grads = nn::zero_grads(model.parameters());
            for &i in batch {
                epoch_loss += model.sample_loss(&dataset[i], &mut rng, &mut grads);
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            adam.update(model.parameters_mut(), &grads);
        }
        epoch_losses.push(epoch_loss / dataset.len() as f64);
    }

    let probe: Vec<TrainingSample> = dataset.iter().take(200).cloned().collect();
    let rate = clean_detection_rate(&model, &probe, &options.config)?;
    let last = epoch_losses.last().copied().unwrap_or(f64::NAN);
    if !last.is_finite() || rate < options.min_train_detection_rate {
        return Err(Error::TrainingDidNotConverge {
            epochs: options.epochs,
            loss: last,
            detection_rate: rate,
        });
    }
    let report = TrainingReport {
        epoch_losses,
        train_detection_rate: rate,
        parameter_count: model.parameters().iter().map(|p| p.len()).sum(),
    };
    Ok((model, report))
}
