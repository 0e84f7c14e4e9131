//! Input transforms applied between compositing and detection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_TV_WEIGHT: f64 = 0.1;

/// Dual step times the weight; 1/8 bounds the squared norm of the gradient operator.
const TV_STEP: f64 = 0.125;
const TV_MAX_ITERATIONS: usize = 5000;
/// Mean per-pixel primal-dual gap at which the solver stops.
const TV_GAP_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseSpec {
    None,
    DownUp,
    Tv { weight: f64 },
}

impl Default for DefenseSpec {
    fn default() -> Self {
        DefenseSpec::None
    }
}

impl DefenseSpec {
    pub fn tv() -> Self {
        DefenseSpec::Tv {
            weight: DEFAULT_TV_WEIGHT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DefenseSpec::Tv { weight } if !(*weight > 0.0 && weight.is_finite()) => {
                Err(Error::InvalidConfig(format!("tv weight must be positive, got {weight}")))
            }
            _ => Ok(()),
        }
    }

    /// Short label used as a report key, e.g. `none`, `down_up`, `tv0.1`.
    pub fn label(&self) -> String {
        match self {
            DefenseSpec::None => "none".into(),
            DefenseSpec::DownUp => "down_up".into(),
            DefenseSpec::Tv { weight } => format!("tv{weight}"),
        }
    }

    pub fn apply(&self, image: &Image) -> Result<Image> {
        self.validate()?;
        match self {
            DefenseSpec::None => Ok(image.clone()),
            DefenseSpec::DownUp => down_up_sample(image),
            DefenseSpec::Tv { weight } => tv_denoise(image, *weight),
        }
    }
}

impl std::str::FromStr for DefenseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let spec = match s {
            "none" => DefenseSpec::None,
            "down_up" => DefenseSpec::DownUp,
            "tv" => DefenseSpec::tv(),
            _ => match s.strip_prefix("tv").map(str::parse::<f64>) {
                Some(Ok(weight)) => DefenseSpec::Tv { weight },
                _ => {
                    return Err(Error::Parse {
                        what: "defense".into(),
                        reason: format!("unknown defense {s:?}"),
                    })
                }
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Bilinear resampling with pixel centers at `i + 0.5` in both grids and
/// clamp-to-edge taps.
fn resample(image: &Image, width: usize, height: usize) -> Image {
    let (sw, sh, c) = image.shape();
    let sx = sw as f64 / width as f64;
    let sy = sh as f64 / height as f64;
    let taps = |x: f64, n: usize| {
        let x = x.clamp(0.0, (n - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Image::new(width, height, c);
    for y in 0..height {
        let (y0, y1, fy) = taps((y as f64 + 0.5) * sy - 0.5, sh);
        for x in 0..width {
            let (x0, x1, fx) = taps((x as f64 + 0.5) * sx - 0.5, sw);
            for ch in 0..c {
                let top = (1.0 - fx) * image.get(x0, y0, ch) + fx * image.get(x1, y0, ch);
                let bottom = (1.0 - fx) * image.get(x0, y1, ch) + fx * image.get(x1, y1, ch);
                out.set(x, y, ch, (1.0 - fy) * top + fy * bottom);
            }
        }
    }
    out
}

/// Halves the resolution (rounding up) and restores it, both bilinearly.
pub fn down_up_sample(image: &Image) -> Result<Image> {
    let (w, h, _) = image.shape();
    if w < 2 || h < 2 {
        return Err(Error::shape("image at least 2x2", format!("{w}x{h}")));
    }
    let small = resample(image, w.div_ceil(2), h.div_ceil(2));
    let mut out = resample(&small, w, h);
    out.clip_unit();
    Ok(out)
}

/// Forward differences with zero flux across the last row and column.
fn gradient(u: &[f64], w: usize, h: usize, gx: &mut [f64], gy: &mut [f64]) {
    for y in 0..h {
        let row = &u[y * w..(y + 1) * w];
        let gxr = &mut gx[y * w..(y + 1) * w];
        for x in 0..w - 1 {
            gxr[x] = row[x + 1] - row[x];
        }
        gxr[w - 1] = 0.0;
        let gyr = &mut gy[y * w..(y + 1) * w];
        if y + 1 < h {
            let next = &u[(y + 1) * w..(y + 2) * w];
            for x in 0..w {
                gyr[x] = next[x] - row[x];
            }
        } else {
            gyr.fill(0.0);
        }
    }
}

/// Negative adjoint of [`gradient`].
fn divergence(px: &[f64], py: &[f64], w: usize, h: usize, out: &mut [f64]) {
    for y in 0..h {
        let pxr = &px[y * w..(y + 1) * w];
        let o = &mut out[y * w..(y + 1) * w];
        if w == 1 {
            o[0] = 0.0;
        } else {
            o[0] = pxr[0];
            for x in 1..w - 1 {
                o[x] = pxr[x] - pxr[x - 1];
            }
            o[w - 1] = -pxr[w - 2];
        }
        if h > 1 {
            let pyr = &py[y * w..(y + 1) * w];
            if y == 0 {
                o.iter_mut().zip(pyr).for_each(|(a, b)| *a += b);
            } else {
                let prev = &py[(y - 1) * w..y * w];
                if y + 1 == h {
                    o.iter_mut().zip(prev).for_each(|(a, b)| *a -= b);
                } else {
                    for x in 0..w {
                        o[x] += pyr[x] - prev[x];
                    }
                }
            }
        }
    }
}

/// Isotropic total variation of one channel plane.
pub fn total_variation(u: &[f64], w: usize, h: usize) -> f64 {
    let mut gx = vec![0.0; u.len()];
    let mut gy = vec![0.0; u.len()];
    gradient(u, w, h, &mut gx, &mut gy);
    gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).sum()
}

/// `½‖u − f‖² + weight · TV(u)`, summed over channels.
pub fn tv_objective(u: &Image, f: &Image, weight: f64) -> f64 {
    let (w, h, c) = u.shape();
    (0..c)
        .map(|ch| {
            let up = channel(u, ch);
            let fp = channel(f, ch);
            let fid: f64 = up.iter().zip(&fp).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum();
            fid + weight * total_variation(&up, w, h)
        })
        .sum()
}

fn channel(img: &Image, ch: usize) -> Vec<f64> {
    img.data().iter().skip(ch).step_by(img.channels()).copied().collect()
}

/// Accelerated projected gradient on the dual (Beck-Teboulle); returns the
/// primal solution `f − weight·div p`.
fn tv_plane(f: &[f64], w: usize, h: usize, weight: f64) -> Result<Vec<f64>> {
    let n = f.len();
    let (mut px, mut py) = (vec![0.0; n], vec![0.0; n]);
    let (mut rx, mut ry) = (vec![0.0; n], vec![0.0; n]);
    let (mut gx, mut gy) = (vec![0.0; n], vec![0.0; n]);
    let mut div = vec![0.0; n];
    let mut u = f.to_vec();
    let mut t = 1.0f64;
    let step = TV_STEP / weight;
    let mut gap = f64::INFINITY;
    for it in 0..TV_MAX_ITERATIONS {
        divergence(&rx, &ry, w, h, &mut div);
        for i in 0..n {
            u[i] = f[i] - weight * div[i];
        }
        gradient(&u, w, h, &mut gx, &mut gy);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        for i in 0..n {
            let (qx, qy) = (rx[i] - step * gx[i], ry[i] - step * gy[i]);
            let scale = (qx * qx + qy * qy).sqrt().max(1.0);
            let (nx, ny) = (qx / scale, qy / scale);
            rx[i] = nx + momentum * (nx - px[i]);
            ry[i] = ny + momentum * (ny - py[i]);
            px[i] = nx;
            py[i] = ny;
        }
        t = t_next;
        if it % 20 == 19 {
            divergence(&px, &py, w, h, &mut div);
            for i in 0..n {
                u[i] = f[i] - weight * div[i];
            }
            // Primal minus dual objective; the dual value is ½‖f‖² − ½‖u‖².
            let primal: f64 =
                u.iter().zip(f).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum::<f64>() + weight * total_variation(&u, w, h);
            let dual: f64 = f.iter().zip(&u).map(|(a, b)| 0.5 * (a * a - b * b)).sum();
            gap = (primal - dual).max(0.0);
            if gap <= TV_GAP_TOLERANCE * n as f64 {
                return Ok(u);
            }
        }
    }
    Err(Error::TvNotConverged {
        iterations: TV_MAX_ITERATIONS,
        residual: gap / n as f64,
    })
}

/// Isotropic TV denoising per channel: `argmin_u ½‖u − f‖² + weight·TV(u)`.
pub fn tv_denoise(image: &Image, weight: f64) -> Result<Image> {
    if !(weight > 0.0 && weight.is_finite()) {
        return Err(Error::InvalidConfig(format!("tv weight must be positive, got {weight}")));
    }
    let (w, h, c) = image.shape();
    let mut out = image.zeros_like();
    for ch in 0..c {
        let u = tv_plane(&channel(image, ch), w, h, weight)?;
        for (i, v) in u.into_iter().enumerate() {
            out.data_mut()[i * c + ch] = v;
        }
    }
    out.clip_unit();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy_step(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(40, 30, 3, |x, _, _| {
            let base = if x < 20 { 0.2 } else { 0.8 };
            (base + rng.gen_range(-0.15..0.15f64)).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn divergence_is_negative_adjoint_of_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (w, h) = (7, 5);
        let u: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let px: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let py: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (mut gx, mut gy, mut d) = (vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]);
        gradient(&u, w, h, &mut gx, &mut gy);
        divergence(&px, &py, w, h, &mut d);
        let lhs: f64 = (0..w * h).map(|i| gx[i] * px[i] + gy[i] * py[i]).sum();
        let rhs: f64 = -(0..w * h).map(|i| u[i] * d[i]).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn constant_images_are_fixed_points() {
        let img = Image::filled(9, 7, 3, 0.37);
        assert!(down_up_sample(&img).unwrap().max_abs_diff(&img) < 1e-15);
        assert!(tv_denoise(&img, 0.1).unwrap().max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn down_up_preserves_odd_shapes() {
        let img = noisy_step(2);
        for (w, h) in [(2, 2), (3, 5), (40, 30), (41, 29)] {
            let sub = Image::from_fn(w, h, 3, |x, y, c| img.get(x, y, c));
            let out = down_up_sample(&sub).unwrap();
            assert_eq!(out.shape(), sub.shape());
            assert!(out.in_unit_range());
        }
        assert!(down_up_sample(&Image::new(1, 4, 3)).is_err());
    }

    #[test]
    fn tiny_weight_is_near_identity() {
        let img = noisy_step(3);
        assert!(tv_denoise(&img, 1e-6).unwrap().max_abs_diff(&img) < 1e-3);
    }

    #[test]
    fn tv_output_has_lower_objective_than_input() {
        for seed in 0..3 {
            let img = noisy_step(seed);
            for weight in [0.05, 0.1, 0.2] {
                let out = tv_denoise(&img, weight).unwrap();
                assert!(out.in_unit_range());
                assert!(tv_objective(&out, &img, weight) <= tv_objective(&img, &img, weight));
            }
        }
    }

    #[test]
    fn defense_labels_parse_back() {
        for d in [DefenseSpec::None, DefenseSpec::DownUp, DefenseSpec::tv(), DefenseSpec::Tv { weight: 0.05 }] {
            assert_eq!(d.label().parse::<DefenseSpec>().unwrap(), d);
        }
        assert!("tv-1".parse::<DefenseSpec>().is_err());
        assert!("blur".parse::<DefenseSpec>().is_err());
    }
}
