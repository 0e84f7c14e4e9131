//! Bilinear compositing of a root texture into a frame, and its adjoint.
//!
//! Each output pixel center is mapped back into root coordinates through the
//! inverse homography. The pixel belongs to the object when the nearest texel
//! is inside the texture mask; its value is then the bilinear sample of the
//! texture at that point. Taps that fall outside the texture contribute zero.
//! Because the view is fixed while the texture changes, the sampling pattern
//! is precomputed once as a [`WarpPlan`] and shared by the forward and adjoint
//! passes, which makes the adjoint exact by construction.

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::registration::{TextureMap, ViewMap};

#[derive(Clone, Copy, Debug)]
struct Sample {
    pixel: u32,
    taps: [(u32, f64); 4],
}

/// Precomputed sampling pattern of one view.
#[derive(Clone, Debug)]
pub struct WarpPlan {
    frame_width: usize,
    frame_height: usize,
    texture_width: usize,
    texture_height: usize,
    illumination: f64,
    samples: Vec<Sample>,
}

impl WarpPlan {
    pub fn new(
        view: &ViewMap,
        texture_mask: &Mask,
        frame_width: usize,
        frame_height: usize,
    ) -> Self {
        let h = &view.homography;
        let inv = h.inverse();
        let (tw, th) = (texture_mask.width(), texture_mask.height());

        // Restrict the scan to the image of the texture extent when the whole
        // extent maps to finite points.
        let corners = [
            [-0.5, -0.5],
            [tw as f64 - 0.5, -0.5],
            [tw as f64 - 0.5, th as f64 - 0.5],
            [-0.5, th as f64 - 0.5],
        ];
        let mapped: Option<Vec<_>> = corners.iter().map(|&c| h.apply(c)).collect();
        let (x0, y0, x1, y1) = match mapped {
            Some(pts) if !pts.is_empty() => {
                let xmin = pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
                let xmax = pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
                let ymin = pts.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
                let ymax = pts.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
                let clampx = |v: f64| v.clamp(0.0, frame_width as f64 - 1.0);
                let clampy = |v: f64| v.clamp(0.0, frame_height as f64 - 1.0);
                (
                    clampx(xmin.floor()) as usize,
                    clampy(ymin.floor()) as usize,
                    clampx(xmax.ceil()) as usize,
                    clampy(ymax.ceil()) as usize,
                )
            }
            _ => (0, 0, frame_width - 1, frame_height - 1),
        };

        let mut samples = Vec::new();
        if frame_width > 0 && frame_height > 0 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let Some([u, v]) = inv.apply([x as f64, y as f64]) else {
                        continue;
                    };
                    if !texture_mask.get_nearest(u, v) {
                        continue;
                    }
                    samples.push(Sample {
                        pixel: (y * frame_width + x) as u32,
                        taps: bilinear_taps(u, v, tw, th),
                    });
                }
            }
        }
        Self {
            frame_width,
            frame_height,
            texture_width: tw,
            texture_height: th,
            illumination: view.illumination,
            samples,
        }
    }

    /// Number of frame pixels covered by the warped mask.
    pub fn support_len(&self) -> usize {
        self.samples.len()
    }

    /// Frame pixels covered by the warped mask.
    pub fn support_mask(&self) -> Mask {
        let mut m = Mask::new(self.frame_width, self.frame_height);
        for s in &self.samples {
            let p = s.pixel as usize;
            m.set(p % self.frame_width, p / self.frame_width, true);
        }
        m
    }

    fn check(&self, frame: &Image, texture: &TextureMap) -> Result<()> {
        if frame.width() != self.frame_width || frame.height() != self.frame_height {
            return Err(Error::shape(
                format!("{}x{} frame", self.frame_width, self.frame_height),
                format!("{}x{}", frame.width(), frame.height()),
            ));
        }
        if texture.width() != self.texture_width
            || texture.height() != self.texture_height
            || texture.channels() != frame.channels()
        {
            return Err(Error::shape(
                format!(
                    "{}x{}x{} texture",
                    self.texture_width,
                    self.texture_height,
                    frame.channels()
                ),
                format!("{:?}", texture.pixels.shape()),
            ));
        }
        Ok(())
    }

    /// Composites `texture` into `frame`. The second value flags, per output
    /// value, whether clipping to `[0, 1]` was active (zero derivative).
    pub fn render(&self, frame: &Image, texture: &TextureMap) -> Result<(Image, Vec<bool>)> {
        self.check(frame, texture)?;
        let c = frame.channels();
        let mut out = frame.clone();
        let mut saturated = vec![false; out.data().len()];
        let tex = texture.pixels.data();
        let reference = texture.reference().map(|r| r.data());
        let data = out.data_mut();
        let mut acc = vec![0.0; c];
        for s in &self.samples {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &(t, w) in &s.taps {
                if w == 0.0 {
                    continue;
                }
                let base = t as usize * c;
                match reference {
                    Some(r) => {
                        for k in 0..c {
                            acc[k] += w * (tex[base + k] - r[base + k]);
                        }
                    }
                    None => {
                        for k in 0..c {
                            acc[k] += w * tex[base + k];
                        }
                    }
                }
            }
            let p = s.pixel as usize * c;
            for k in 0..c {
                let raw = match reference {
                    Some(_) => data[p + k] + self.illumination * acc[k],
                    None => acc[k],
                };
                saturated[p + k] = !(0.0..=1.0).contains(&raw);
                data[p + k] = raw.clamp(0.0, 1.0);
            }
        }
        Ok((out, saturated))
    }

    /// Adjoint of the warp: pulls a frame-space co-vector back to texel space.
    /// The illumination factor is applied when the texture is a perturbation;
    /// entries outside the texture mask are zero.
    pub fn backproject(&self, frame_gradient: &Image, texture: &TextureMap) -> Result<Image> {
        if frame_gradient.width() != self.frame_width
            || frame_gradient.height() != self.frame_height
        {
            return Err(Error::shape(
                format!("{}x{} gradient", self.frame_width, self.frame_height),
                format!("{}x{}", frame_gradient.width(), frame_gradient.height()),
            ));
        }
        let c = frame_gradient.channels();
        let mut out = Image::new(self.texture_width, self.texture_height, c);
        let g = frame_gradient.data();
        let factor = if texture.reference().is_some() {
            self.illumination
        } else {
            1.0
        };
        let od = out.data_mut();
        for s in &self.samples {
            let p = s.pixel as usize * c;
            for &(t, w) in &s.taps {
                if w == 0.0 {
                    continue;
                }
                let base = t as usize * c;
                for k in 0..c {
                    od[base + k] += factor * w * g[p + k];
                }
            }
        }
        for y in 0..self.texture_height {
            for x in 0..self.texture_width {
                if !texture.mask.get(x, y) {
                    out.pixel_mut(x, y).iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        Ok(out)
    }
}

#[inline]
fn bilinear_taps(u: f64, v: f64, w: usize, h: usize) -> [(u32, f64); 4] {
    let u0 = u.floor();
    let v0 = v.floor();
    let fu = u - u0;
    let fv = v - v0;
    let (iu, iv) = (u0 as i64, v0 as i64);
    let mut taps = [(0u32, 0.0); 4];
    let cand = [
        (iu, iv, (1.0 - fu) * (1.0 - fv)),
        (iu + 1, iv, fu * (1.0 - fv)),
        (iu, iv + 1, (1.0 - fu) * fv),
        (iu + 1, iv + 1, fu * fv),
    ];
    for (slot, &(x, y, wt)) in taps.iter_mut().zip(&cand) {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            *slot = ((y as usize * w + x as usize) as u32, wt);
        }
    }
    taps
}

/// Superimposes `texture` on `frame.image` through `view`.
pub fn composite(frame: &Image, texture: &TextureMap, view: &ViewMap) -> Result<Image> {
    let plan = WarpPlan::new(view, &texture.mask, frame.width(), frame.height());
    Ok(plan.render(frame, texture)?.0)
}

/// Maps a frame-space gradient back to root coordinates (exact adjoint of
/// [`composite`] with clipping inactive).
pub fn backproject_gradient(
    frame_gradient: &Image,
    view: &ViewMap,
    texture: &TextureMap,
) -> Result<Image> {
    let plan = WarpPlan::new(
        view,
        &texture.mask,
        frame_gradient.width(),
        frame_gradient.height(),
    );
    plan.backproject(frame_gradient, texture)
}

/// Elementwise mean of per-frame texture gradients, reduced in list order.
pub fn merge_gradients(grads: &[Image]) -> Result<Image> {
    let first = grads.first().ok_or(Error::Empty("gradient list"))?;
    let mut out = first.clone();
    for g in &grads[1..] {
        if !g.same_shape(first) {
            return Err(Error::shape(
                format!("{:?}", first.shape()),
                format!("{:?}", g.shape()),
            ));
        }
        for (o, v) in out.data_mut().iter_mut().zip(g.data()) {
            *o += v;
        }
    }
    let n = grads.len() as f64;
    out.data_mut().iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registration::Homography;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scalar reference: inverse-map each pixel and bilinear-sample by hand.
    fn reference_composite(frame: &Image, tex: &TextureMap, view: &ViewMap) -> Image {
        let m = view.homography.matrix().try_inverse().unwrap();
        let mut out = frame.clone();
        let (tw, th) = (tex.width() as i64, tex.height() as i64);
        for y in 0..frame.height() {
            for x in 0..frame.width() {
                let (xf, yf) = (x as f64, y as f64);
                let w = m[(2, 0)] * xf + m[(2, 1)] * yf + m[(2, 2)];
                if w <= 1e-12 {
                    continue;
                }
                let u = (m[(0, 0)] * xf + m[(0, 1)] * yf + m[(0, 2)]) / w;
                let v = (m[(1, 0)] * xf + m[(1, 1)] * yf + m[(1, 2)]) / w;
                let (ur, vr) = (u.round() as i64, v.round() as i64);
                if ur < 0 || vr < 0 || ur >= tw || vr >= th || !tex.mask.get(ur as usize, vr as usize) {
                    continue;
                }
                for c in 0..frame.channels() {
                    let texel = |i: i64, j: i64| -> f64 {
                        if i < 0 || j < 0 || i >= tw || j >= th {
                            return 0.0;
                        }
                        let t = tex.pixels.get(i as usize, j as usize, c);
                        match tex.reference() {
                            Some(r) => t - r.get(i as usize, j as usize, c),
                            None => t,
                        }
                    };
                    let (i0, j0) = (u.floor() as i64, v.floor() as i64);
                    let (a, b) = (u - u.floor(), v - v.floor());
                    let s = (1.0 - a) * (1.0 - b) * texel(i0, j0)
                        + a * (1.0 - b) * texel(i0 + 1, j0)
                        + (1.0 - a) * b * texel(i0, j0 + 1)
                        + a * b * texel(i0 + 1, j0 + 1);
                    let val = match tex.reference() {
                        Some(_) => frame.get(x, y, c) + view.illumination * s,
                        None => s,
                    };
                    out.set(x, y, c, val.clamp(0.0, 1.0));
                }
            }
        }
        out
    }

    fn random_view(rng: &mut ChaCha8Rng, illumination: f64) -> ViewMap {
        let th: f64 = rng.gen_range(-0.3..0.3);
        let s: f64 = rng.gen_range(0.4..1.3);
        let h = Homography::from_rows([
            [s * th.cos(), -s * th.sin(), rng.gen_range(5.0..30.0)],
            [s * th.sin(), s * th.cos(), rng.gen_range(5.0..20.0)],
            [rng.gen_range(-2e-3..2e-3), rng.gen_range(-2e-3..2e-3), 1.0],
        ])
        .unwrap();
        ViewMap::new(h, illumination).unwrap()
    }

    fn disk_mask(w: usize, h: usize) -> Mask {
        let (cx, cy, r) = (w as f64 / 2.0, h as f64 / 2.0, w.min(h) as f64 * 0.45);
        Mask::from_fn(w, h, |x, y| {
            (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) < r * r
        })
    }

    #[test]
    fn black_texture_on_identity_rectangle() {
        let frame = Image::filled(12, 10, 3, 0.7);
        let mask = Mask::from_fn(5, 4, |_, _| true);
        let tex = TextureMap::new(Image::new(5, 4, 3), mask).unwrap();
        let out = composite(&frame, &tex, &ViewMap::identity()).unwrap();
        for y in 0..10 {
            for x in 0..12 {
                let expected = if x < 5 && y < 4 { 0.0 } else { 0.7 };
                for c in 0..3 {
                    assert_eq!(out.get(x, y, c), expected, "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn matches_scalar_reference_warper() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for with_reference in [false, true] {
            let frame = Image::from_fn(60, 45, 3, |_, _, _| rng.gen::<f64>());
            let pixels = Image::from_fn(32, 32, 3, |_, _, _| rng.gen::<f64>());
            let mut tex = TextureMap::new(pixels, disk_mask(32, 32)).unwrap();
            if with_reference {
                let r = Image::from_fn(32, 32, 3, |_, _, _| rng.gen::<f64>());
                tex = tex.with_reference(r).unwrap();
            }
            let view = random_view(&mut rng, 0.8);
            let fast = composite(&frame, &tex, &view).unwrap();
            let slow = reference_composite(&frame, &tex, &view);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn same_pattern_is_nearly_identity() {
        // A smooth pattern already present in the frame, re-composited at
        // illumination 1, changes the frame only by interpolation error.
        let pattern = |x: f64, y: f64, c: usize| 0.5 + 0.3 * ((x * 0.05 + c as f64).sin() * (y * 0.04).cos());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let view = random_view(&mut rng, 1.0);
        let tex_img = Image::from_fn(48, 48, 3, |x, y, c| pattern(x as f64, y as f64, c));
        let tex = TextureMap::new(tex_img, disk_mask(48, 48)).unwrap();
        let inv = view.homography.inverse();
        let frame = Image::from_fn(80, 70, 3, |x, y, c| match inv.apply([x as f64, y as f64]) {
            Some([u, v]) => pattern(u, v, c),
            None => 0.0,
        });
        let out = composite(&frame, &tex, &view).unwrap();
        assert!(out.max_abs_diff(&frame) < 2e-2);
    }

    #[test]
    fn outside_pixels_are_bit_identical_and_range_is_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frame = Image::from_fn(50, 40, 3, |_, _, _| rng.gen::<f64>());
        let tex = TextureMap::new(Image::from_fn(24, 24, 3, |_, _, _| rng.gen()), disk_mask(24, 24))
            .unwrap()
            .with_reference(Image::new(24, 24, 3))
            .unwrap();
        let view = random_view(&mut rng, 1.7);
        let plan = WarpPlan::new(&view, &tex.mask, 50, 40);
        let support = plan.support_mask();
        let (out, _) = plan.render(&frame, &tex).unwrap();
        assert!(out.in_unit_range());
        for y in 0..40 {
            for x in 0..50 {
                if !support.get(x, y) {
                    assert_eq!(out.pixel(x, y), frame.pixel(x, y));
                }
            }
        }
    }

    #[test]
    fn zero_gradient_backprojects_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tex = TextureMap::new(Image::filled(16, 16, 3, 0.5), disk_mask(16, 16)).unwrap();
        let g = backproject_gradient(&Image::new(40, 30, 3), &random_view(&mut rng, 1.0), &tex).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_gradient_spreads_bilinear_weights() {
        // Identity view with a sub-pixel shift so four texels share the pixel.
        let h = Homography::from_rows([[1.0, 0.0, -0.25], [0.0, 1.0, -0.4], [0.0, 0.0, 1.0]]).unwrap();
        let view = ViewMap::new(h, 1.0).unwrap();
        let tex = TextureMap::new(Image::filled(10, 10, 1, 0.5), Mask::full(10, 10)).unwrap();
        let mut g = Image::new(10, 10, 1);
        g.set(4, 4, 0, 1.0);
        let t = backproject_gradient(&g, &view, &tex).unwrap();
        let nonzero: Vec<f64> = t.data().iter().copied().filter(|&v| v != 0.0).collect();
        assert_eq!(nonzero.len(), 4);
        assert!((nonzero.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((t.get(4, 4, 0) - 0.75 * 0.6).abs() < 1e-12);
        assert!((t.get(5, 5, 0) - 0.25 * 0.4).abs() < 1e-12);
    }

    #[test]
    fn adjoint_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let frame = Image::filled(64, 48, 3, 0.5);
        let base = Image::from_fn(32, 32, 3, |_, _, _| rng.gen_range(0.4..0.6));
        let tex = TextureMap::perturbable(base.clone(), disk_mask(32, 32)).unwrap();
        let view = random_view(&mut rng, 0.9);
        let covector = Image::from_fn(64, 48, 3, |_, _, _| rng.gen_range(-1.0..1.0));
        let delta = Image::from_fn(32, 32, 3, |x, y, _| {
            if tex.mask.get(x, y) { rng.gen_range(-0.05..0.05) } else { 0.0 }
        });
        let mut moved = tex.clone();
        for (p, d) in moved.pixels.data_mut().iter_mut().zip(delta.data()) {
            *p += d;
        }
        let lhs = covector.dot(&composite(&frame, &moved, &view).unwrap())
            - covector.dot(&composite(&frame, &tex, &view).unwrap());
        let rhs = backproject_gradient(&covector, &view, &tex).unwrap().dot(&delta);
        assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn merge_gradient_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Image::from_fn(4, 3, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        assert_eq!(merge_gradients(&[g.clone(), g.clone()]).unwrap(), g);
        let mut neg = g.clone();
        neg.data_mut().iter_mut().for_each(|v| *v = -*v);
        assert!(merge_gradients(&[g.clone(), neg]).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(merge_gradients(&[]), Err(Error::Empty(_))));

        let list: Vec<Image> = (0..5)
            .map(|_| Image::from_fn(4, 3, 2, |_, _, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let m = merge_gradients(&list).unwrap();
        for i in 0..m.data().len() {
            let mut s = 0.0;
            for l in &list {
                s += l.data()[i];
            }
            assert!((m.data()[i] - s / 5.0).abs() < 1e-15);
        }
    }
}
