//! Minimal layers with hand-written backward passes.
//!
//! Activations are `C × H × W` arrays. Convolutions go through im2col and a
//! single matrix product, which is what keeps CPU training tractable.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::Rect;
use crate::image::Image;

/// Named parameter tensor, stored flat in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn he_normal(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub fn image_to_chw(image: &Image) -> Array3<f64> {
    let (w, h, c) = image.shape();
    let mut out = Array3::zeros((c, h, w));
    let data = image.data();
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * c;
            for k in 0..c {
                out[[k, y, x]] = data[base + k];
            }
        }
    }
    out
}

pub fn chw_to_image(t: &Array3<f64>) -> Image {
    let (c, h, w) = t.dim();
    Image::from_fn(w, h, c, |x, y, k| t[[k, y, x]])
}

/// Convolution geometry; parameters live in a separate weight/bias pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub const fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            dilation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn parameter_count(&self) -> usize {
        self.out_channels * self.fan_in() + self.out_channels
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let oh = (h + 2 * self.padding - span) / self.stride + 1;
        let ow = (w + 2 * self.padding - span) / self.stride + 1;
        (oh, ow)
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let mut cols = Array2::zeros((c * k * k, oh * ow));
        let xs = x.as_slice().expect("contiguous");
        let pad = self.padding as isize;
        for ch in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let mut dst = cols.row_mut(row);
                    let dst = dst.as_slice_mut().expect("contiguous row");
                    let dy = (ky * self.dilation) as isize - pad;
                    let dx = (kx * self.dilation) as isize - pad;
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = (ch * h + iy as usize) * w;
                        let out_row = oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + dx;
                            if ix >= 0 && ix < w as isize {
                                dst[out_row + ox] = xs[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
        let c = self.in_channels;
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let mut x = Array3::zeros((c, h, w));
        let xs = x.as_slice_mut().expect("contiguous");
        let pad = self.padding as isize;
        for ch in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let src = cols.row(row);
                    let src = src.as_slice().expect("contiguous row");
                    let dy = (ky * self.dilation) as isize - pad;
                    let dx = (kx * self.dilation) as isize - pad;
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = (ch * h + iy as usize) * w;
                        let in_row = oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + dx;
                            if ix >= 0 && ix < w as isize {
                                xs[dst_row + ix as usize] += src[in_row + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the output and the im2col matrix needed by [`Conv2d::backward`].
    pub fn forward(&self, weight: &[f64], bias: &[f64], x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w);
        let cols = self.im2col(x);
        let wm = ArrayView2::from_shape((self.out_channels, self.fan_in()), weight).expect("weight shape");
        let mut out = Array2::zeros((self.out_channels, oh * ow));
        for (mut row, &b) in out.rows_mut().into_iter().zip(bias) {
            row.fill(b);
        }
        general_mat_mul(1.0, &wm, &cols, 1.0, &mut out);
        let out = out
            .into_shape_with_order((self.out_channels, oh, ow))
            .expect("output shape");
        (out, cols)
    }

    /// Accumulates parameter gradients into `grad_weight`/`grad_bias` (when
    /// given) and returns the input gradient when `input_hw` is given.
    pub fn backward(
        &self,
        weight: &[f64],
        cols: &Array2<f64>,
        grad_out: &Array3<f64>,
        input_hw: Option<(usize, usize)>,
        params: Option<(&mut [f64], &mut [f64])>,
    ) -> Option<Array3<f64>> {
        let (oc, oh, ow) = grad_out.dim();
        let g = grad_out
            .view()
            .into_shape_with_order((oc, oh * ow))
            .expect("grad shape");
        if let Some((gw, gb)) = params {
            let mut gwm = ArrayViewMut2::from_shape((oc, self.fan_in()), gw).expect("grad weight shape");
            general_mat_mul(1.0, &g, &cols.t(), 1.0, &mut gwm);
            let mut gbv = ArrayViewMut1::from(gb);
            gbv += &g.sum_axis(ndarray::Axis(1));
        }
        input_hw.map(|(h, w)| {
            let wm = ArrayView2::from_shape((oc, self.fan_in()), weight).expect("weight shape");
            let mut dcols = Array2::zeros((self.fan_in(), oh * ow));
            general_mat_mul(1.0, &wm.t(), &g, 0.0, &mut dcols);
            self.col2im(&dcols, h, w)
        })
    }
}

pub fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes gradient entries where the (post-ReLU) activation is zero.
pub fn relu_backward(activation: &Array3<f64>, grad: &mut Array3<f64>) {
    ndarray::Zip::from(grad).and(activation).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// 2×2 mean pooling (odd trailing rows/columns are dropped).
pub fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[[ch, y, xx]] = 0.25
                    * (x[[ch, 2 * y, 2 * xx]]
                        + x[[ch, 2 * y, 2 * xx + 1]]
                        + x[[ch, 2 * y + 1, 2 * xx]]
                        + x[[ch, 2 * y + 1, 2 * xx + 1]]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (c, oh, ow) = grad.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * grad[[ch, y, x]];
                out[[ch, 2 * y, 2 * x]] += g;
                out[[ch, 2 * y, 2 * x + 1]] += g;
                out[[ch, 2 * y + 1, 2 * x]] += g;
                out[[ch, 2 * y + 1, 2 * x + 1]] += g;
            }
        }
    }
    out
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Gradient of `p[target]` with respect to the logits, given `p = softmax(z)`.
pub fn softmax_prob_grad(p: &[f64], target: usize) -> Vec<f64> {
    p.iter()
        .enumerate()
        .map(|(j, &pj)| {
            let delta = if j == target { 1.0 } else { 0.0 };
            p[target] * (delta - pj)
        })
        .collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Fully connected layer `y = W x + b` with `W` of shape `out × in`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn parameter_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    pub fn forward(&self, weight: &[f64], bias: &[f64], x: ArrayView1<f64>) -> Array1<f64> {
        let wm = ArrayView2::from_shape((self.outputs, self.inputs), weight).expect("weight shape");
        wm.dot(&x) + ArrayView1::from(bias)
    }

    pub fn backward(
        &self,
        weight: &[f64],
        x: ArrayView1<f64>,
        grad_out: ArrayView1<f64>,
        params: Option<(&mut [f64], &mut [f64])>,
    ) -> Array1<f64> {
        if let Some((gw, gb)) = params {
            for o in 0..self.outputs {
                let g = grad_out[o];
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                let row = &mut gw[o * self.inputs..(o + 1) * self.inputs];
                for (r, &xi) in row.iter_mut().zip(x.iter()) {
                    *r += g * xi;
                }
            }
        }
        let wm = ArrayView2::from_shape((self.outputs, self.inputs), weight).expect("weight shape");
        wm.t().dot(&grad_out)
    }
}

/// Bilinear RoI pooling of a feature map into `bins × bins` cells, one sample
/// per bin center. `scale` maps image coordinates to feature coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiAlign {
    pub bins: usize,
    pub scale: f64,
    pub offset: f64,
}

impl RoiAlign {
    fn sample_points(&self, rect: &Rect) -> Vec<(f64, f64)> {
        let b = self.bins as f64;
        let mut pts = Vec::with_capacity(self.bins * self.bins);
        for by in 0..self.bins {
            for bx in 0..self.bins {
                let x = rect.x_min + (bx as f64 + 0.5) / b * rect.width();
                let y = rect.y_min + (by as f64 + 0.5) / b * rect.height();
                pts.push((x * self.scale + self.offset, y * self.scale + self.offset));
            }
        }
        pts
    }

    fn taps(fx: f64, fy: f64, h: usize, w: usize) -> [(usize, usize, f64); 4] {
        let fx = fx.clamp(0.0, w as f64 - 1.0);
        let fy = fy.clamp(0.0, h as f64 - 1.0);
        let x0 = (fx.floor() as usize).min(w - 1);
        let y0 = (fy.floor() as usize).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let (a, b) = (fx - x0 as f64, fy - y0 as f64);
        [
            (y0, x0, (1.0 - a) * (1.0 - b)),
            (y0, x1, a * (1.0 - b)),
            (y1, x0, (1.0 - a) * b),
            (y1, x1, a * b),
        ]
    }

    /// Pooled features flattened as `channel × bin`.
    pub fn forward(&self, features: &Array3<f64>, rect: &Rect) -> Array1<f64> {
        let (c, h, w) = features.dim();
        let pts = self.sample_points(rect);
        let nb = pts.len();
        let mut out = Array1::zeros(c * nb);
        for (i, &(fx, fy)) in pts.iter().enumerate() {
            for (yy, xx, wt) in Self::taps(fx, fy, h, w) {
                if wt == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    out[ch * nb + i] += wt * features[[ch, yy, xx]];
                }
            }
        }
        out
    }

    /// Gradient of `grad_out · forward(features, rect)` with respect to
    /// `[x_min, y_min, x_max, y_max]`.
    pub fn rect_gradient(&self, features: &Array3<f64>, rect: &Rect, grad_out: ArrayView1<f64>) -> [f64; 4] {
        let (c, h, w) = features.dim();
        let b = self.bins as f64;
        let nb = self.bins * self.bins;
        let mut g = [0.0; 4];
        for by in 0..self.bins {
            for bx in 0..self.bins {
                let i = by * self.bins + bx;
                let (u, v) = ((bx as f64 + 0.5) / b, (by as f64 + 0.5) / b);
                let fx = (rect.x_min + u * rect.width()) * self.scale + self.offset;
                let fy = (rect.y_min + v * rect.height()) * self.scale + self.offset;
                let x_live = fx > 0.0 && fx < w as f64 - 1.0;
                let y_live = fy > 0.0 && fy < h as f64 - 1.0;
                if !x_live && !y_live {
                    continue;
                }
                let fxc = fx.clamp(0.0, w as f64 - 1.0);
                let fyc = fy.clamp(0.0, h as f64 - 1.0);
                let x0 = (fxc.floor() as usize).min(w - 1);
                let y0 = (fyc.floor() as usize).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let (a, bb) = (fxc - x0 as f64, fyc - y0 as f64);
                let (mut dfx, mut dfy) = (0.0, 0.0);
                for ch in 0..c {
                    let go = grad_out[ch * nb + i];
                    if go == 0.0 {
                        continue;
                    }
                    let f = |yy: usize, xx: usize| features[[ch, yy, xx]];
                    if x_live {
                        dfx += go * ((1.0 - bb) * (f(y0, x1) - f(y0, x0)) + bb * (f(y1, x1) - f(y1, x0)));
                    }
                    if y_live {
                        dfy += go * ((1.0 - a) * (f(y1, x0) - f(y0, x0)) + a * (f(y1, x1) - f(y0, x1)));
                    }
                }
                g[0] += dfx * self.scale * (1.0 - u);
                g[2] += dfx * self.scale * u;
                g[1] += dfy * self.scale * (1.0 - v);
                g[3] += dfy * self.scale * v;
            }
        }
        g
    }

    pub fn backward(&self, grad_features: &mut Array3<f64>, rect: &Rect, grad_out: ArrayView1<f64>) {
        let (c, h, w) = grad_features.dim();
        let pts = self.sample_points(rect);
        let nb = pts.len();
        for (i, &(fx, fy)) in pts.iter().enumerate() {
            for (yy, xx, wt) in Self::taps(fx, fy, h, w) {
                if wt == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    grad_features[[ch, yy, xx]] += wt * grad_out[ch * nb + i];
                }
            }
        }
    }
}

/// Adam over a list of flat parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

pub(crate) fn zero_grads(params: &[Tensor]) -> Vec<Vec<f64>> {
    params.iter().map(|p| vec![0.0; p.len()]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random3(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct convolution, used only as an oracle for the im2col path.
    fn naive_conv(conv: &Conv2d, weight: &[f64], bias: &[f64], x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = conv.output_size(h, w);
        let k = conv.kernel;
        let mut out = Array3::zeros((conv.out_channels, oh, ow));
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias[o];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky * conv.dilation) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kx * conv.dilation) as isize - conv.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += weight[((o * c + ic) * k + ky) * k + kx] * x[[ic, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    out[[o, oy, ox]] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_and_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for conv in [
            Conv2d::new(2, 3, 3, 2, 1, 1),
            Conv2d::new(3, 2, 3, 1, 2, 2),
            Conv2d::new(2, 2, 5, 2, 2, 1),
            Conv2d::new(3, 4, 1, 1, 0, 1),
        ] {
            let x = random3(&mut rng, conv.in_channels, 9, 11);
            let w: Vec<f64> = (0..conv.out_channels * conv.fan_in()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..conv.out_channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (out, cols) = conv.forward(&w, &b, &x);
            let naive = naive_conv(&conv, &w, &b, &x);
            assert!((&out - &naive).mapv(f64::abs).iter().all(|&d| d < 1e-12));

            // Scalar loss L = <R, conv(x)>.
            let r = random3(&mut rng, out.dim().0, out.dim().1, out.dim().2);
            let mut gw = vec![0.0; w.len()];
            let mut gb = vec![0.0; b.len()];
            let gx = conv
                .backward(&w, &cols, &r, Some((9, 11)), Some((&mut gw, &mut gb)))
                .unwrap();
            let loss = |w: &[f64], b: &[f64], x: &Array3<f64>| (naive_conv(&conv, w, b, x) * &r).sum();
            let h = 1e-6;
            for i in [0, 3, x.len() - 1] {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.as_slice_mut().unwrap()[i] += h;
                xm.as_slice_mut().unwrap()[i] -= h;
                let fd = (loss(&w, &b, &xp) - loss(&w, &b, &xm)) / (2.0 * h);
                assert!((fd - gx.as_slice().unwrap()[i]).abs() < 1e-6);
            }
            for i in [0, w.len() / 2, w.len() - 1] {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[i] += h;
                wm[i] -= h;
                let fd = (loss(&wp, &b, &x) - loss(&wm, &b, &x)) / (2.0 * h);
                assert!((fd - gw[i]).abs() < 1e-6);
            }
            assert!((gb[0] - r.index_axis(ndarray::Axis(0), 0).sum()).abs() < 1e-9);
        }
    }

    #[test]
    fn pooling_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random3(&mut rng, 2, 6, 8);
        let g = random3(&mut rng, 2, 3, 4);
        let lhs = (avg_pool2(&x) * &g).sum();
        let rhs = (avg_pool2_backward(&g, 6, 8) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn roi_align_and_linear_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random3(&mut rng, 3, 7, 9);
        let roi = RoiAlign { bins: 3, scale: 0.25, offset: -0.5 };
        let rect = Rect::new(3.3, 2.1, 25.7, 20.2);
        let g = Array1::from_shape_fn(27, |_| rng.gen_range(-1.0..1.0));
        let lhs = roi.forward(&f, &rect).dot(&g);
        let mut gf = Array3::zeros(f.dim());
        roi.backward(&mut gf, &rect, g.view());
        assert!((lhs - (gf * &f).sum()).abs() < 1e-12);

        let lin = Linear { inputs: 5, outputs: 3 };
        let w: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = vec![0.1, 0.2, 0.3];
        let x = Array1::from_shape_fn(5, |_| rng.gen_range(-1.0..1.0));
        let go = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        let y = lin.forward(&w, &b, x.view());
        let gx = lin.backward(&w, x.view(), go.view(), None);
        let h = 1e-6;
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += h;
            let fd = (lin.forward(&w, &b, xp.view()).dot(&go) - y.dot(&go)) / h;
            assert!((fd - gx[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let z = [0.3, -1.2, 2.0];
        let p = softmax(&z);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let g = softmax_prob_grad(&p, 1);
        for j in 0..3 {
            let mut zp = z;
            let mut zm = z;
            zp[j] += 1e-6;
            zm[j] -= 1e-6;
            let fd = (softmax(&zp)[1] - softmax(&zm)[1]) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-9);
        }
    }
}
