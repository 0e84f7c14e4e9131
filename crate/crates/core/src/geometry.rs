//! Planar geometry helpers: points, polygons, axis-aligned rectangles.

use serde::{Deserialize, Serialize};

use crate::image::Mask;

pub type Point = [f64; 2];

/// Shoelace area; positive for counter-clockwise vertex order in a y-up frame.
pub fn signed_area(polygon: &[Point]) -> f64 {
    let n = polygon.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = polygon[i];
        let [x1, y1] = polygon[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

pub fn polygon_area(polygon: &[Point]) -> f64 {
    signed_area(polygon).abs()
}

/// Strict interior test: points on an edge are outside.
pub fn point_in_polygon(p: Point, polygon: &[Point]) -> bool {
    let n = polygon.len();
    if n < 3 {
        return false;
    }
    // Boundary points are rejected explicitly so the crossing test below only
    // decides genuine interior/exterior cases.
    for i in 0..n {
        let a = polygon[i];
        let b = polygon[(i + 1) % n];
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        if cross == 0.0
            && p[0] >= a[0].min(b[0])
            && p[0] <= a[0].max(b[0])
            && p[1] >= a[1].min(b[1])
            && p[1] <= a[1].max(b[1])
        {
            return false;
        }
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (polygon[i][0], polygon[i][1]);
        let (xj, yj) = (polygon[j][0], polygon[j][1]);
        if (yi > p[1]) != (yj > p[1]) {
            let x_cross = xj + (p[1] - yj) * (xi - xj) / (yi - yj);
            if p[0] < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Marks every pixel whose center lies strictly inside `polygon`.
pub fn rasterize_polygon(polygon: &[Point], width: usize, height: usize) -> Mask {
    let Some(bounds) = Rect::bounding(polygon) else {
        return Mask::new(width, height);
    };
    let x0 = bounds.x_min.floor().max(0.0) as usize;
    let y0 = bounds.y_min.floor().max(0.0) as usize;
    let x1 = (bounds.x_max.ceil().max(0.0) as usize).min(width.saturating_sub(1));
    let y1 = (bounds.y_max.ceil().max(0.0) as usize).min(height.saturating_sub(1));
    let mut mask = Mask::new(width, height);
    if width == 0 || height == 0 {
        return mask;
    }
    for y in y0..=y1 {
        for x in x0..=x1 {
            if point_in_polygon([x as f64, y as f64], polygon) {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

/// Clamps vertices into `[0, width-1] × [0, height-1]`.
pub fn clamp_polygon(polygon: &[Point], width: usize, height: usize) -> Vec<Point> {
    let xm = width.saturating_sub(1) as f64;
    let ym = height.saturating_sub(1) as f64;
    polygon
        .iter()
        .map(|&[x, y]| [x.clamp(0.0, xm), y.clamp(0.0, ym)])
        .collect()
}

/// Vertices of a regular octagon with flat top and bottom edges.
pub fn regular_octagon(center: Point, circumradius: f64) -> Vec<Point> {
    (0..8)
        .map(|k| {
            let a = std::f64::consts::PI / 8.0 + k as f64 * std::f64::consts::PI / 4.0;
            [
                center[0] + circumradius * a.cos(),
                center[1] + circumradius * a.sin(),
            ]
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn bounding(points: &[Point]) -> Option<Self> {
        let first = points.first()?;
        let mut r = Rect::new(first[0], first[1], first[0], first[1]);
        for p in &points[1..] {
            r.x_min = r.x_min.min(p[0]);
            r.y_min = r.y_min.min(p[1]);
            r.x_max = r.x_max.max(p[0]);
            r.y_max = r.y_max.max(p[1]);
        }
        Some(r)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> Point {
        [
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        ]
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn intersection(&self, other: &Rect) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clamps into the image and keeps at least `min_size` extent on each axis.
    pub fn clamped(&self, width: f64, height: f64, min_size: f64) -> Rect {
        let mut r = Rect::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        );
        if r.x_max - r.x_min < min_size {
            let c = (0.5 * (r.x_min + r.x_max)).clamp(0.5 * min_size, width - 0.5 * min_size);
            r.x_min = c - 0.5 * min_size;
            r.x_max = c + 0.5 * min_size;
        }
        if r.y_max - r.y_min < min_size {
            let c = (0.5 * (r.y_min + r.y_max)).clamp(0.5 * min_size, height - 0.5 * min_size);
            r.y_min = c - 0.5 * min_size;
            r.y_max = c + 0.5 * min_size;
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_area_and_interior() {
        let sq = [[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]];
        assert_eq!(polygon_area(&sq), 16.0);
        assert!(point_in_polygon([1.0, 1.0], &sq));
        assert!(!point_in_polygon([0.0, 1.0], &sq));
        assert!(!point_in_polygon([4.0, 4.0], &sq));
        assert!(!point_in_polygon([5.0, 1.0], &sq));
        let m = rasterize_polygon(&sq, 8, 8);
        assert_eq!(m.count(), 9);
    }

    #[test]
    fn octagon_area_matches_closed_form() {
        let r = 10.0;
        let oct = regular_octagon([0.0, 0.0], r);
        let expected = 2.0 * std::f64::consts::SQRT_2 * r * r;
        assert!((polygon_area(&oct) - expected).abs() < 1e-9);
    }

    #[test]
    fn iou_of_identical_and_disjoint() {
        let a = Rect::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&Rect::new(3.0, 3.0, 4.0, 4.0)), 0.0);
        let b = Rect::new(1.0, 0.0, 3.0, 2.0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
    }
}
