//! Homography estimation by normalized DLT.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;

/// Minimum `|det|` for a canonical homography to count as invertible.
pub const INVERTIBILITY_TOLERANCE: f64 = 1e-12;

/// Root-to-frame homography in canonical form (bottom-right entry 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    /// Canonicalizes `m` and checks invertibility.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let corner = m[(2, 2)];
        if !corner.is_finite() || corner.abs() < 1e-300 {
            return Err(Error::DegenerateCorrespondences(
                "bottom-right entry is zero; cannot canonicalize".into(),
            ));
        }
        let m = m / corner;
        let det = m.determinant();
        if !det.is_finite() || det.abs() <= INVERTIBILITY_TOLERANCE {
            return Err(Error::SingularHomography { det });
        }
        Ok(Self { m })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.m;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    pub fn determinant(&self) -> f64 {
        self.m.determinant()
    }

    pub fn inverse(&self) -> Homography {
        // Invertibility is an invariant of the type.
        let inv = self.m.try_inverse().expect("canonical homography is invertible");
        Homography::from_matrix(inv).unwrap_or(Homography { m: inv })
    }

    pub fn compose(&self, then: &Homography) -> Result<Homography> {
        Homography::from_matrix(then.m * self.m)
    }

    /// Maps a point; `None` when it lands on or behind the line at infinity.
    #[inline]
    pub fn apply(&self, p: Point) -> Option<Point> {
        let m = &self.m;
        let w = m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)];
        if w <= 1e-12 {
            return None;
        }
        Some([
            (m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)]) / w,
            (m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)]) / w,
        ])
    }

    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        (self.m - other.m).abs().max()
    }
}

impl Serialize for Homography {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Homography::from_rows(rows).map_err(serde::de::Error::custom)
    }
}

/// Root-to-frame point pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarCorrespondenceSet {
    pairs: Vec<(Point, Point)>,
}

impl PlanarCorrespondenceSet {
    pub fn new(pairs: Vec<(Point, Point)>) -> Result<Self> {
        if pairs.len() < 4 {
            return Err(Error::DegenerateCorrespondences(format!(
                "need at least 4 pairs, got {}",
                pairs.len()
            )));
        }
        for (i, a) in pairs.iter().enumerate() {
            if a.0.iter().chain(&a.1).any(|v| !v.is_finite()) {
                return Err(Error::DegenerateCorrespondences(format!(
                    "pair {i} has non-finite coordinates"
                )));
            }
            for b in &pairs[i + 1..] {
                if a.0 == b.0 {
                    return Err(Error::DegenerateCorrespondences(format!(
                        "coincident root points at {:?}",
                        a.0
                    )));
                }
            }
        }
        Ok(Self { pairs })
    }

    pub fn from_points(root: &[Point], frame: &[Point]) -> Result<Self> {
        if root.len() != frame.len() {
            return Err(Error::shape(
                format!("{} frame points", root.len()),
                frame.len(),
            ));
        }
        Self::new(root.iter().copied().zip(frame.iter().copied()).collect())
    }

    pub fn pairs(&self) -> &[(Point, Point)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// True when every root point lies in `[0, width-1] × [0, height-1]`.
    pub fn roots_within(&self, width: usize, height: usize) -> bool {
        self.pairs.iter().all(|(r, _)| {
            (0.0..=(width as f64 - 1.0)).contains(&r[0])
                && (0.0..=(height as f64 - 1.0)).contains(&r[1])
        })
    }
}

/// Similarity that moves the centroid to the origin and sets the mean distance
/// from it to sqrt(2).
fn normalizing_transform(points: impl Iterator<Item = Point> + Clone) -> Result<Matrix3<f64>> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points
        .clone()
        .fold((0.0, 0.0), |(ax, ay), p| (ax + p[0], ay + p[1]));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = points
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist <= f64::EPSILON {
        return Err(Error::DegenerateCorrespondences(
            "all points coincide".into(),
        ));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn transform(t: &Matrix3<f64>, p: Point) -> Point {
    let v = t * Vector3::new(p[0], p[1], 1.0);
    [v[0] / v[2], v[1] / v[2]]
}

/// Normalized direct linear transform.
///
/// Minimizes the algebraic error of `x' × H x = 0` over all pairs after
/// Hartley normalization of both point sets, then denormalizes and returns the
/// canonical matrix.
pub fn estimate_homography(corr: &PlanarCorrespondenceSet) -> Result<Homography> {
    let pairs = corr.pairs();
    let t_root = normalizing_transform(pairs.iter().map(|p| p.0))?;
    let t_frame = normalizing_transform(pairs.iter().map(|p| p.1))?;

    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, &(root, frame)) in pairs.iter().enumerate() {
        let [x, y] = transform(&t_root, root);
        let [u, v] = transform(&t_frame, frame);
        let r0 = 2 * i;
        let r1 = r0 + 1;
        let row0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let row1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(r0, c)] = row0[c];
            a[(r1, c)] = row1[c];
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateCorrespondences("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let smallest = order[0];
    let second = svd.singular_values[order[1]];
    let largest = svd.singular_values[order[order.len() - 1]];
    if largest <= 0.0 || second / largest < 1e-9 {
        return Err(Error::DegenerateCorrespondences(format!(
            "design matrix is rank deficient (sigma_8/sigma_1 = {:e})",
            if largest > 0.0 { second / largest } else { 0.0 }
        )));
    }
    let h = v_t.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t_frame_inv = t_frame
        .try_inverse()
        .ok_or_else(|| Error::DegenerateCorrespondences("normalization failed".into()))?;
    let m = t_frame_inv * hn * t_root;
    Homography::from_matrix(m).map_err(|e| match e {
        Error::SingularHomography { .. } => Error::DegenerateCorrespondences(e.to_string()),
        other => other,
    })
}

/// Largest frame-space distance between mapped root points and their partners.
pub fn max_reprojection_error(h: &Homography, corr: &PlanarCorrespondenceSet) -> f64 {
    corr.pairs()
        .iter()
        .map(|&(r, f)| match h.apply(r) {
            Some(p) => ((p[0] - f[0]).powi(2) + (p[1] - f[1]).powi(2)).sqrt(),
            None => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}

/// Homography plus the illumination factor relating one frame to the
/// reference frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMap {
    pub homography: Homography,
    /// Object intensity in this frame divided by that of the reference frame.
    pub illumination: f64,
}

impl ViewMap {
    pub fn new(homography: Homography, illumination: f64) -> Result<Self> {
        if !(illumination.is_finite() && illumination > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "illumination must be positive, got {illumination}"
            )));
        }
        Ok(Self {
            homography,
            illumination,
        })
    }

    pub fn identity() -> Self {
        Self {
            homography: Homography::identity(),
            illumination: 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::regular_octagon;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_square() -> Vec<Point> {
        vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
    }

    fn random_homography(rng: &mut ChaCha8Rng) -> Homography {
        let theta: f64 = rng.gen_range(-0.5..0.5);
        let s: f64 = rng.gen_range(0.3..1.5);
        let m = Matrix3::new(
            s * theta.cos(),
            -s * theta.sin() + rng.gen_range(-0.1..0.1),
            rng.gen_range(0.0..200.0),
            s * theta.sin(),
            s * theta.cos(),
            rng.gen_range(0.0..150.0),
            rng.gen_range(-1e-3..1e-3),
            rng.gen_range(-1e-3..1e-3),
            1.0,
        );
        Homography::from_matrix(m).unwrap()
    }

    #[test]
    fn identity_from_unit_square() {
        let sq = unit_square();
        let corr = PlanarCorrespondenceSet::from_points(&sq, &sq).unwrap();
        let h = estimate_homography(&corr).unwrap();
        assert!(h.max_abs_diff(&Homography::identity()) < 1e-12);
    }

    #[test]
    fn pure_scaling() {
        let sq = unit_square();
        let scaled: Vec<Point> = sq.iter().map(|p| [2.0 * p[0], 2.0 * p[1]]).collect();
        let corr = PlanarCorrespondenceSet::from_points(&sq, &scaled).unwrap();
        let h = estimate_homography(&corr).unwrap();
        let expected = Homography::from_rows([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert!(h.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn recovers_known_homography_from_octagon() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let oct = regular_octagon([64.0, 64.0], 62.0);
        for _ in 0..50 {
            let truth = random_homography(&mut rng);
            let frame: Vec<Point> = oct.iter().map(|&p| truth.apply(p).unwrap()).collect();
            let corr = PlanarCorrespondenceSet::from_points(&oct, &frame).unwrap();
            let h = estimate_homography(&corr).unwrap();
            assert!(h.max_abs_diff(&truth) < 1e-6, "{}", h.max_abs_diff(&truth));
            assert!(max_reprojection_error(&h, &corr) < 1e-6);
        }
    }

    #[test]
    fn canonicalization_ignores_overall_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = random_homography(&mut rng);
        let scaled = Homography::from_matrix(truth.matrix() * -3.7).unwrap();
        assert!(truth.max_abs_diff(&scaled) < 1e-12);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let root = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        let corr = PlanarCorrespondenceSet::from_points(&root, &root).unwrap();
        assert!(matches!(
            estimate_homography(&corr),
            Err(Error::DegenerateCorrespondences(_))
        ));
    }

    #[test]
    fn too_few_or_coincident_points_rejected() {
        let p = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]];
        assert!(PlanarCorrespondenceSet::from_points(&p, &p).is_err());
        let q = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [1.0, 0.0]];
        assert!(PlanarCorrespondenceSet::from_points(&q, &q).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random_homography(&mut rng);
        let s = serde_json::to_string(&h).unwrap();
        let back: Homography = serde_json::from_str(&s).unwrap();
        assert_eq!(h, back);
    }
}
