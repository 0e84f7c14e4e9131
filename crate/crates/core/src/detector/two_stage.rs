//! Two-stage detector: a dense objectness head proposes boxes, then each box
//! is classified from bilinearly resized (RoI-aligned) backbone features.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{self, Conv2d, Linear, RoiAlign, Tensor};
use super::train::{assign_cells, CellTarget, TrainingSample};
use super::{
    decode_cell_box, decode_cell_box_jacobian, nms_sorted, Aggregation, Architecture, DetectionBox, Detector, DetectorPass,
    BACKGROUND,
};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStageArchitecture {
    pub backbone: Vec<Conv2d>,
    pub anchor: f64,
    pub num_classes: usize,
    pub roi_bins: usize,
    pub hidden: usize,
    pub max_proposals: usize,
    pub proposal_nms_iou: f64,
}

impl Default for TwoStageArchitecture {
    fn default() -> Self {
        Self {
            backbone: vec![
                Conv2d::new(3, 12, 5, 2, 2, 1),
                Conv2d::new(12, 16, 3, 2, 1, 1),
                Conv2d::new(16, 32, 3, 2, 1, 1),
                Conv2d::new(32, 32, 3, 1, 1, 1),
            ],
            anchor: 64.0,
            num_classes: 3,
            roi_bins: 4,
            hidden: 32,
            max_proposals: 12,
            proposal_nms_iou: 0.5,
        }
    }
}

impl TwoStageArchitecture {
    fn channels(&self) -> usize {
        self.backbone.last().map(|l| l.out_channels).unwrap_or(3)
    }

    pub fn stride(&self) -> usize {
        2 * self.backbone.iter().map(|l| l.stride).product::<usize>()
    }

    pub fn rpn(&self) -> Conv2d {
        Conv2d::new(self.channels(), 5, 1, 1, 0, 1)
    }

    pub fn roi(&self) -> RoiAlign {
        let s = self.stride() as f64;
        RoiAlign {
            bins: self.roi_bins,
            scale: 1.0 / s,
            offset: -(s - 1.0) / (2.0 * s),
        }
    }

    pub fn fc1(&self) -> Linear {
        Linear {
            inputs: self.channels() * self.roi_bins * self.roi_bins,
            outputs: self.hidden,
        }
    }

    pub fn fc2(&self) -> Linear {
        Linear {
            inputs: self.hidden,
            outputs: self.num_classes,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.backbone.iter().map(Conv2d::parameter_count).sum::<usize>()
            + self.rpn().parameter_count()
            + self.fc1().parameter_count()
            + self.fc2().parameter_count()
    }
}

#[derive(Clone, Debug)]
pub struct TwoStageDetector {
    pub(crate) id: String,
    pub(crate) arch: TwoStageArchitecture,
    pub(crate) classes: Vec<String>,
    pub(crate) params: Vec<Tensor>,
}

struct ConvCache {
    cols: Array2<f64>,
    input_hw: (usize, usize),
    output: Array3<f64>,
}

struct RoiCache {
    rect: Rect,
    /// Proposal cell and its regression outputs.
    cell: (usize, usize),
    t: [f64; 4],
    pooled: Array1<f64>,
    hidden: Array1<f64>,
    probs: Vec<f64>,
}

pub(crate) struct TwoStagePass<'a> {
    det: &'a TwoStageDetector,
    image_hw: (usize, usize),
    backbone: Vec<ConvCache>,
    rpn: ConvCache,
    rois: Vec<RoiCache>,
    proposals: Vec<DetectionBox>,
}

impl TwoStagePass<'_> {
    fn features(&self) -> &Array3<f64> {
        &self.backbone.last().expect("backbone").output
    }
}

impl TwoStageDetector {
    pub fn new(id: impl Into<String>, mut arch: TwoStageArchitecture, classes: Vec<String>, seed: u64) -> Self {
        arch.num_classes = classes.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (i, l) in arch.backbone.iter().enumerate() {
            params.push(Tensor::he_normal(format!("backbone{i}.weight"), &l.weight_shape(), l.fan_in(), &mut rng));
            params.push(Tensor::zeros(format!("backbone{i}.bias"), &[l.out_channels]));
        }
        let rpn = arch.rpn();
        params.push(Tensor::he_normal("rpn.weight", &rpn.weight_shape(), rpn.fan_in(), &mut rng));
        params.push(Tensor::zeros("rpn.bias", &[rpn.out_channels]));
        for (name, l) in [("fc1", arch.fc1()), ("fc2", arch.fc2())] {
            params.push(Tensor::he_normal(format!("{name}.weight"), &[l.outputs, l.inputs], l.inputs, &mut rng));
            params.push(Tensor::zeros(format!("{name}.bias"), &[l.outputs]));
        }
        Self {
            id: id.into(),
            arch,
            classes,
            params,
        }
    }

    pub(crate) fn from_parts(
        id: String,
        arch: TwoStageArchitecture,
        classes: Vec<String>,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        let det = Self::new(id, arch, classes, 0);
        if det.params.len() != params.len()
            || det.params.iter().zip(&params).any(|(a, b)| a.shape != b.shape)
        {
            return Err(Error::Checkpoint("parameter shapes do not match architecture".into()));
        }
        Ok(Self { params, ..det })
    }

    fn rpn_index(&self) -> usize {
        2 * self.arch.backbone.len()
    }

    fn classify(&self, features: &Array3<f64>, rect: Rect, cell: (usize, usize), t: [f64; 4]) -> RoiCache {
        let i = self.rpn_index() + 2;
        let pooled = self.arch.roi().forward(features, &rect);
        let mut hidden = self.arch.fc1().forward(&self.params[i].data, &self.params[i + 1].data, pooled.view());
        hidden.mapv_inplace(|v| v.max(0.0));
        let logits = self.arch.fc2().forward(&self.params[i + 2].data, &self.params[i + 3].data, hidden.view());
        let probs = nn::softmax(logits.as_slice().expect("contiguous"));
        RoiCache {
            rect,
            cell,
            t,
            pooled,
            hidden,
            probs,
        }
    }

    /// Pushes a logit gradient for one RoI back into the feature map and
    /// returns the gradient of the pooled features.
    fn classify_backward(
        &self,
        roi: &RoiCache,
        grad_logits: &[f64],
        grad_features: &mut Array3<f64>,
        grads: Option<&mut [Vec<f64>]>,
    ) -> Array1<f64> {
        let i = self.rpn_index() + 2;
        let gl = Array1::from(grad_logits.to_vec());
        let (fc1, fc2) = (self.arch.fc1(), self.arch.fc2());
        let (mut dh, dpooled);
        match grads {
            Some(gs) => {
                let (lo, hi) = gs.split_at_mut(i + 2);
                let (w2, b2) = hi.split_at_mut(1);
                dh = fc2.backward(&self.params[i + 2].data, roi.hidden.view(), gl.view(), Some((w2[0].as_mut_slice(), b2[0].as_mut_slice())));
                dh.zip_mut_with(&roi.hidden, |g, &h| {
                    if h <= 0.0 {
                        *g = 0.0
                    }
                });
                let (w1, b1) = lo[i..].split_at_mut(1);
                dpooled = fc1.backward(&self.params[i].data, roi.pooled.view(), dh.view(), Some((w1[0].as_mut_slice(), b1[0].as_mut_slice())));
            }
            None => {
                dh = fc2.backward(&self.params[i + 2].data, roi.hidden.view(), gl.view(), None);
                dh.zip_mut_with(&roi.hidden, |g, &h| {
                    if h <= 0.0 {
                        *g = 0.0
                    }
                });
                dpooled = fc1.backward(&self.params[i].data, roi.pooled.view(), dh.view(), None);
            }
        }
        self.arch.roi().backward(grad_features, &roi.rect, dpooled.view());
        dpooled
    }

    fn run(&self, image: &Image) -> Result<TwoStagePass<'_>> {
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
        let mut backbone = Vec::with_capacity(self.arch.backbone.len());
        for (i, l) in self.arch.backbone.iter().enumerate() {
            let input_hw = (act.dim().1, act.dim().2);
            let (mut out, cols) = l.forward(&self.params[2 * i].data, &self.params[2 * i + 1].data, &act);
            nn::relu_inplace(&mut out);
            act = out.clone();
            backbone.push(ConvCache {
                cols,
                input_hw,
                output: out,
            });
        }
        let r = self.rpn_index();
        let input_hw = (act.dim().1, act.dim().2);
        let (rpn_out, rpn_cols) = self.arch.rpn().forward(&self.params[r].data, &self.params[r + 1].data, &act);
        let (_, gh, gw) = rpn_out.dim();
        let (w, h) = (image.width() as f64, image.height() as f64);

        let mut cells: Vec<((usize, usize), f64, Rect, [f64; 4])> = Vec::with_capacity(gh * gw);
        for gy in 0..gh {
            for gx in 0..gw {
                let obj = nn::sigmoid(rpn_out[[0, gy, gx]]);
                let t = [
                    rpn_out[[1, gy, gx]],
                    rpn_out[[2, gy, gx]],
                    rpn_out[[3, gy, gx]],
                    rpn_out[[4, gy, gx]],
                ];
                cells.push(((gx, gy), obj, decode_cell_box(gx, gy, t, stride as f64, self.arch.anchor, w, h), t));
            }
        }
        cells.sort_by(|a, b| b.1.total_cmp(&a.1));
        let rects: Vec<Rect> = cells.iter().map(|c| c.2).collect();
        let keep = nms_sorted(&rects, self.arch.proposal_nms_iou);
        let mut rois = Vec::new();
        let mut proposals = Vec::new();
        for &k in keep.iter().take(self.arch.max_proposals) {
            let (cell, obj, rect, t) = cells[k];
            let roi = self.classify(&act, rect, cell, t);
            proposals.push(DetectionBox {
                rect,
                class_scores: roi.probs.clone(),
                objectness: obj,
                proposal: proposals.len(),
            });
            rois.push(roi);
        }
        Ok(TwoStagePass {
            det: self,
            image_hw: (image.height(), image.width()),
            backbone,
            rpn: ConvCache {
                cols: rpn_cols,
                input_hw,
                output: rpn_out,
            },
            rois,
            proposals,
        })
    }

    fn backbone_backward(
        &self,
        pass: &TwoStagePass<'_>,
        grad_features: Array3<f64>,
        mut grads: Option<&mut [Vec<f64>]>,
        want_input: bool,
    ) -> Option<Image> {
        let mut g = grad_features;
        for i in (0..self.arch.backbone.len()).rev() {
            let cache = &pass.backbone[i];
            nn::relu_backward(&cache.output, &mut g);
            let need_input = i > 0 || want_input;
            let param_grads = grads.as_deref_mut().map(|gs| {
                let (a, b) = gs.split_at_mut(2 * i + 1);
                (a[2 * i].as_mut_slice(), b[0].as_mut_slice())
            });
            g = self.arch.backbone[i].backward(
                &self.params[2 * i].data,
                &cache.cols,
                &g,
                need_input.then_some(cache.input_hw),
                param_grads,
            )?;
        }
        let (h, w) = pass.image_hw;
        Some(nn::chw_to_image(&nn::avg_pool2_backward(&g, h, w)))
    }

    pub(crate) fn sample_loss(&self, sample: &TrainingSample, rng: &mut ChaCha8Rng, grads: &mut [Vec<f64>]) -> f64 {
        let image = sample.image();
        let pass = self.run(&image).expect("training image shape");
        let stride = self.arch.stride() as f64;
        let rpn_out = &pass.rpn.output;
        let (_, gh, gw) = rpn_out.dim();
        let targets = assign_cells(&sample.objects, gw, gh, stride, self.arch.anchor);
        let n_pos = targets.iter().filter(|t| matches!(t, CellTarget::Positive { .. })).count();
        let n_neg = targets.iter().filter(|t| matches!(t, CellTarget::Background)).count();
        let mut loss = 0.0;

        // Proposal stage.
        let mut grad_rpn = Array3::zeros(rpn_out.dim());
        for gy in 0..gh {
            for gx in 0..gw {
                let (y, weight) = match &targets[gy * gw + gx] {
                    CellTarget::Ignore => continue,
                    CellTarget::Background => (0.0, 1.0 / n_neg.max(1) as f64),
                    CellTarget::Positive { .. } => (1.0, 1.0 / n_pos.max(1) as f64),
                };
                let z = rpn_out[[0, gy, gx]];
                let p = nn::sigmoid(z);
                loss -= weight * (y * p.max(1e-12).ln() + (1.0 - y) * (1.0 - p).max(1e-12).ln());
                grad_rpn[[0, gy, gx]] += weight * (p - y);
                if let CellTarget::Positive { target, .. } = &targets[gy * gw + gx] {
                    for j in 0..4 {
                        let (l, d) = nn::smooth_l1(rpn_out[[1 + j, gy, gx]] - target[j]);
                        loss += l / n_pos as f64;
                        grad_rpn[[1 + j, gy, gx]] += d / n_pos as f64;
                    }
                }
            }
        }

        // Classification stage on sampled RoIs.
        let (w, h) = (image.width() as f64, image.height() as f64);
        let mut rois: Vec<(Rect, usize)> = Vec::new();
        for gt in &sample.objects {
            rois.push((gt.rect, gt.class));
            for _ in 0..2 {
                let c = gt.rect.center();
                let s = rng.gen_range(0.85..1.15);
                let jit = Rect::from_center(
                    c[0] + rng.gen_range(-0.1..0.1) * gt.rect.width(),
                    c[1] + rng.gen_range(-0.1..0.1) * gt.rect.height(),
                    gt.rect.width() * s,
                    gt.rect.height() * s * rng.gen_range(0.9..1.1),
                )
                .clamped(w, h, 4.0);
                if jit.iou(&gt.rect) >= 0.5 {
                    rois.push((jit, gt.class));
                }
            }
        }
        let mut negatives = 0;
        for _ in 0..40 {
            if negatives >= 6 {
                break;
            }
            let size = rng.gen_range(24.0..140.0);
            let r = Rect::from_center(
                rng.gen_range(0.0..w),
                rng.gen_range(0.0..h),
                size,
                size * rng.gen_range(0.8..1.25),
            )
            .clamped(w, h, 4.0);
            if sample.objects.iter().all(|gt| gt.rect.iou(&r) < 0.3) {
                rois.push((r, BACKGROUND));
                negatives += 1;
            }
        }
        for p in pass.proposals.iter().take(4) {
            let best = sample
                .objects
                .iter()
                .map(|gt| (gt.rect.iou(&p.rect), gt.class))
                .max_by(|a, b| a.0.total_cmp(&b.0));
            match best {
                Some((iou, class)) if iou >= 0.5 => rois.push((p.rect, class)),
                Some((iou, _)) if iou >= 0.3 => {}
                _ => rois.push((p.rect, BACKGROUND)),
            }
        }

        let features = pass.features();
        let mut grad_features = Array3::zeros(features.dim());
        let nr = rois.len() as f64;
        for (rect, label) in rois {
            let roi = self.classify(features, rect, (0, 0), [0.0; 4]);
            loss -= roi.probs[label].max(1e-12).ln() / nr;
            let gl: Vec<f64> = roi
                .probs
                .iter()
                .enumerate()
                .map(|(c, &p)| (p - if c == label { 1.0 } else { 0.0 }) / nr)
                .collect();
            self.classify_backward(&roi, &gl, &mut grad_features, Some(grads));
        }

        let r = self.rpn_index();
        {
            let (a, b) = grads.split_at_mut(r + 1);
            let g = self
                .arch
                .rpn()
                .backward(
                    &self.params[r].data,
                    &pass.rpn.cols,
                    &grad_rpn,
                    Some(pass.rpn.input_hw),
                    Some((a[r].as_mut_slice(), b[0].as_mut_slice())),
                )
                .expect("input gradient");
            grad_features += &g;
        }
        self.backbone_backward(&pass, grad_features, Some(grads), false);
        loss
    }
}

impl DetectorPass for TwoStagePass<'_> {
    fn proposals(&self) -> &[DetectionBox] {
        &self.proposals
    }

    fn score_gradient(&self, subset: &[usize], class: usize, aggregation: Aggregation) -> Result<(f64, Image)> {
        if subset.is_empty() {
            return Err(Error::Empty("box subset"));
        }
        if class >= self.det.arch.num_classes {
            return Err(Error::InvalidConfig(format!("class {class} out of range")));
        }
        if let Some(&bad) = subset.iter().find(|&&i| i >= self.rois.len()) {
            return Err(Error::InvalidConfig(format!("proposal {bad} out of range")));
        }
        let scores: Vec<f64> = subset.iter().map(|&i| self.rois[i].probs[class]).collect();
        let (value, weighted): (f64, Vec<(usize, f64)>) = match aggregation {
            Aggregation::Mean => (
                scores.iter().sum::<f64>() / scores.len() as f64,
                subset.iter().map(|&i| (i, 1.0 / subset.len() as f64)).collect(),
            ),
            Aggregation::Max => {
                let best = (0..subset.len())
                    .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
                    .expect("nonempty");
                (scores[best], vec![(subset[best], 1.0)])
            }
        };
        // Boxes depend on the image through the regression outputs, so the
        // pooled-feature gradient also flows back through the box corners.
        let arch = &self.det.arch;
        let (h, w) = self.image_hw;
        let mut grad_features = Array3::zeros(self.features().dim());
        let mut grad_rpn = Array3::zeros(self.rpn.output.dim());
        for (i, weight) in weighted {
            let roi = &self.rois[i];
            let d: Vec<f64> = nn::softmax_prob_grad(&roi.probs, class).into_iter().map(|v| v * weight).collect();
            let dpooled = self.det.classify_backward(roi, &d, &mut grad_features, None);
            let g_rect = arch.roi().rect_gradient(self.features(), &roi.rect, dpooled.view());
            let (gx, gy) = roi.cell;
            let jac = decode_cell_box_jacobian(gx, gy, roi.t, arch.stride() as f64, arch.anchor, w as f64, h as f64);
            for (k, row) in jac.iter().enumerate() {
                for j in 0..4 {
                    grad_rpn[[1 + j, gy, gx]] += g_rect[k] * row[j];
                }
            }
        }
        let r = self.det.rpn_index();
        if let Some(g) = arch.rpn().backward(
            &self.det.params[r].data,
            &self.rpn.cols,
            &grad_rpn,
            Some(self.rpn.input_hw),
            None,
        ) {
            grad_features += &g;
        }
        let grad = self
            .det
            .backbone_backward(self, grad_features, None, true)
            .expect("input gradient requested");
        Ok((value, grad))
    }
}

impl Detector for TwoStageDetector {
    fn id(&self) -> &str {
        &self.id
    }

    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn architecture(&self) -> Architecture {
        Architecture::TwoStage(self.arch.clone())
    }

    fn forward<'a>(&'a self, image: &Image) -> Result<Box<dyn DetectorPass + 'a>> {
        Ok(Box::new(self.run(image)?))
    }
}
