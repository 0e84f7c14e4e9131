//! One-stage detector: a small convnet predicting class scores and a box for
//! every cell of a fixed grid.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{self, Conv2d, Tensor};
use super::train::{assign_cells, CellTarget, TrainingSample};
use super::{decode_cell_box, Aggregation, Architecture, DetectionBox, Detector, DetectorPass, BACKGROUND};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridArchitecture {
    /// Convolutions applied after an initial 2×2 mean pool, each followed by
    /// a ReLU.
    pub backbone: Vec<Conv2d>,
    /// Default box size in pixels; cell boxes scale it by `exp(t)`.
    pub anchor: f64,
    pub num_classes: usize,
}

impl Default for GridArchitecture {
    fn default() -> Self {
        Self {
            backbone: vec![
                Conv2d::new(3, 8, 3, 2, 1, 1),
                Conv2d::new(8, 16, 3, 2, 1, 1),
                Conv2d::new(16, 24, 3, 2, 1, 1),
                Conv2d::new(24, 32, 3, 1, 1, 1),
                Conv2d::new(32, 32, 3, 1, 2, 2),
            ],
            anchor: 64.0,
            num_classes: 3,
        }
    }
}

impl GridArchitecture {
    pub fn head(&self) -> Conv2d {
        let c = self.backbone.last().map(|l| l.out_channels).unwrap_or(3);
        Conv2d::new(c, self.num_classes + 4, 1, 1, 0, 1)
    }

    /// Pixels per grid cell.
    pub fn stride(&self) -> usize {
        2 * self.backbone.iter().map(|l| l.stride).product::<usize>()
    }

    pub fn parameter_count(&self) -> usize {
        self.backbone.iter().map(Conv2d::parameter_count).sum::<usize>() + self.head().parameter_count()
    }

    fn layers(&self) -> Vec<Conv2d> {
        let mut l = self.backbone.clone();
        l.push(self.head());
        l
    }
}

#[derive(Clone, Debug)]
pub struct GridDetector {
    pub(crate) id: String,
    pub(crate) arch: GridArchitecture,
    pub(crate) classes: Vec<String>,
    pub(crate) params: Vec<Tensor>,
}

struct LayerCache {
    cols: Array2<f64>,
    input_hw: (usize, usize),
    /// Post-activation output (post-ReLU for backbone layers).
    output: Array3<f64>,
}

pub(crate) struct GridPass<'a> {
    det: &'a GridDetector,
    image_hw: (usize, usize),
    pooled_hw: (usize, usize),
    layers: Vec<LayerCache>,
    grid: (usize, usize),
    proposals: Vec<DetectionBox>,
}

impl GridDetector {
    pub fn new(id: impl Into<String>, mut arch: GridArchitecture, classes: Vec<String>, seed: u64) -> Self {
        arch.num_classes = classes.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (i, l) in arch.layers().iter().enumerate() {
            params.push(Tensor::he_normal(format!("conv{i}.weight"), &l.weight_shape(), l.fan_in(), &mut rng));
            params.push(Tensor::zeros(format!("conv{i}.bias"), &[l.out_channels]));
        }
        Self {
            id: id.into(),
            arch,
            classes,
            params,
        }
    }

    pub(crate) fn from_parts(id: String, arch: GridArchitecture, classes: Vec<String>, params: Vec<Tensor>) -> Result<Self> {
        let det = Self::new(id, arch, classes, 0);
        if det.params.len() != params.len()
            || det.params.iter().zip(&params).any(|(a, b)| a.shape != b.shape)
        {
            return Err(Error::Checkpoint("parameter shapes do not match architecture".into()));
        }
        Ok(Self { params, ..det })
    }

    pub fn architecture_descriptor(&self) -> &GridArchitecture {
        &self.arch
    }

    fn run(&self, image: &Image) -> Result<GridPass<'_>> {
        if image.channels() != 3 {
            return Err(Error::shape("3-channel image", image.channels()));
        }
        let stride = self.arch.stride();
        if image.width() < stride || image.height() < stride {
            return Err(Error::shape(
                format!("image at least {stride}x{stride}"),
                format!("{}x{}", image.width(), image.height()),
            ));
        }
        let x = nn::image_to_chw(image);
        let mut act = nn::avg_pool2(&x);
        let pooled_hw = (act.dim().1, act.dim().2);
        let layers_desc = self.arch.layers();
        let n = layers_desc.len();
        let mut layers = Vec::with_capacity(n);
        for (i, l) in layers_desc.iter().enumerate() {
            let input_hw = (act.dim().1, act.dim().2);
            let (mut out, cols) = l.forward(&self.params[2 * i].data, &self.params[2 * i + 1].data, &act);
            if i + 1 < n {
                nn::relu_inplace(&mut out);
            }
            act = out.clone();
            layers.push(LayerCache {
                cols,
                input_hw,
                output: out,
            });
        }
        let head = &layers.last().expect("head layer").output;
        let (_, gh, gw) = head.dim();
        let k = self.arch.num_classes;
        let (w, h) = (image.width() as f64, image.height() as f64);
        let mut proposals = Vec::with_capacity(gh * gw);
        for gy in 0..gh {
            for gx in 0..gw {
                let logits: Vec<f64> = (0..k).map(|c| head[[c, gy, gx]]).collect();
                let p = nn::softmax(&logits);
                let t = [
                    head[[k, gy, gx]],
                    head[[k + 1, gy, gx]],
                    head[[k + 2, gy, gx]],
                    head[[k + 3, gy, gx]],
                ];
                let rect = decode_cell_box(gx, gy, t, stride as f64, self.arch.anchor, w, h);
                proposals.push(DetectionBox {
                    rect,
                    objectness: 1.0 - p[BACKGROUND],
                    class_scores: p,
                    proposal: gy * gw + gx,
                });
            }
        }
        Ok(GridPass {
            det: self,
            image_hw: (image.height(), image.width()),
            pooled_hw,
            layers,
            grid: (gh, gw),
            proposals,
        })
    }

    /// Backpropagates a head-output gradient; accumulates parameter gradients
    /// when `grads` is given and returns the image gradient when asked.
    fn backward(
        &self,
        pass: &GridPass<'_>,
        grad_head: Array3<f64>,
        mut grads: Option<&mut [Vec<f64>]>,
        want_input: bool,
    ) -> Option<Image> {
        let layers_desc = self.arch.layers();
        let n = layers_desc.len();
        let mut g = grad_head;
        for i in (0..n).rev() {
            let cache = &pass.layers[i];
            if i + 1 < n {
                nn::relu_backward(&cache.output, &mut g);
            }
            let need_input = i > 0 || want_input;
            let param_grads = grads.as_deref_mut().map(|gs| {
                let (a, b) = gs.split_at_mut(2 * i + 1);
                (a[2 * i].as_mut_slice(), b[0].as_mut_slice())
            });
            let next = layers_desc[i].backward(
                &self.params[2 * i].data,
                &cache.cols,
                &g,
                need_input.then_some(cache.input_hw),
                param_grads,
            );
            match next {
                Some(prev) => g = prev,
                None => return None,
            }
        }
        let (h, w) = pass.image_hw;
        debug_assert_eq!((g.dim().1, g.dim().2), pass.pooled_hw);
        Some(nn::chw_to_image(&nn::avg_pool2_backward(&g, h, w)))
    }

    pub(crate) fn sample_loss(&self, sample: &TrainingSample, grads: &mut [Vec<f64>]) -> f64 {
        let image = sample.image();
        let pass = self.run(&image).expect("training image shape");
        let (gh, gw) = pass.grid;
        let k = self.arch.num_classes;
        let stride = self.arch.stride() as f64;
        let targets = assign_cells(&sample.objects, gw, gh, stride, self.arch.anchor);
        let head = &pass.layers.last().expect("head").output;
        let n_pos = targets.iter().filter(|t| matches!(t, CellTarget::Positive { .. })).count();
        let n_neg = targets.iter().filter(|t| matches!(t, CellTarget::Background)).count();
        let mut grad_head = Array3::zeros(head.dim());
        let mut loss = 0.0;
        for gy in 0..gh {
            for gx in 0..gw {
                let cell = gy * gw + gx;
                let (label, weight) = match &targets[cell] {
                    CellTarget::Ignore => continue,
                    CellTarget::Background => (BACKGROUND, 1.0 / n_neg.max(1) as f64),
                    CellTarget::Positive { class, .. } => (*class, 1.0 / n_pos.max(1) as f64),
                };
                let p = &pass.proposals[cell].class_scores;
                loss -= weight * p[label].max(1e-12).ln();
                for c in 0..k {
                    let onehot = if c == label { 1.0 } else { 0.0 };
                    grad_head[[c, gy, gx]] += weight * (p[c] - onehot);
                }
                if let CellTarget::Positive { target, .. } = &targets[cell] {
                    for j in 0..4 {
                        let (l, d) = nn::smooth_l1(head[[k + j, gy, gx]] - target[j]);
                        let bw = 1.0 / n_pos as f64;
                        loss += bw * l;
                        grad_head[[k + j, gy, gx]] += bw * d;
                    }
                }
            }
        }
        self.backward(&pass, grad_head, Some(grads), false);
        loss
    }
}

impl DetectorPass for GridPass<'_> {
    fn proposals(&self) -> &[DetectionBox] {
        &self.proposals
    }

    fn score_gradient(&self, subset: &[usize], class: usize, aggregation: Aggregation) -> Result<(f64, Image)> {
        if subset.is_empty() {
            return Err(Error::Empty("box subset"));
        }
        let k = self.det.arch.num_classes;
        if class >= k {
            return Err(Error::InvalidConfig(format!("class {class} out of range")));
        }
        let (gh, gw) = self.grid;
        if let Some(&bad) = subset.iter().find(|&&i| i >= gh * gw) {
            return Err(Error::InvalidConfig(format!("proposal {bad} out of range")));
        }
        let scores: Vec<f64> = subset.iter().map(|&i| self.proposals[i].score(class)).collect();
        let weighted: Vec<(usize, f64)> = match aggregation {
            Aggregation::Mean => subset.iter().map(|&i| (i, 1.0 / subset.len() as f64)).collect(),
            Aggregation::Max => {
                let best = (0..subset.len())
                    .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
                    .expect("nonempty");
                vec![(subset[best], 1.0)]
            }
        };
        let value = match aggregation {
            Aggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
            Aggregation::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        let head_dim = self.layers.last().expect("head").output.dim();
        let mut grad_head = Array3::zeros(head_dim);
        for (i, w) in weighted {
            let (gy, gx) = (i / gw, i % gw);
            let d = nn::softmax_prob_grad(&self.proposals[i].class_scores, class);
            for c in 0..k {
                grad_head[[c, gy, gx]] += w * d[c];
            }
        }
        let grad = self
            .det
            .backward(self, grad_head, None, true)
            .expect("input gradient requested");
        Ok((value, grad))
    }
}

impl Detector for GridDetector {
    fn id(&self) -> &str {
        &self.id
    }

    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn architecture(&self) -> Architecture {
        Architecture::Grid(self.arch.clone())
    }

    fn forward<'a>(&'a self, image: &Image) -> Result<Box<dyn DetectorPass + 'a>> {
        Ok(Box::new(self.run(image)?))
    }
}
