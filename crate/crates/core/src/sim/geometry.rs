//! Planar geometry primitives used by ray casting and collision checks.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

/// A wall segment in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Point,
    pub b: Point,
}

impl Segment {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            a: Point::new(x1, y1),
            b: Point::new(x2, y2),
        }
    }

    pub fn len(&self) -> f64 {
        self.a.dist(self.b)
    }

    pub fn is_degenerate(&self) -> bool {
        self.len() < 1e-12
    }

    /// Closest point of the segment to `p`.
    pub fn closest_point(&self, p: Point) -> Point {
        let (ex, ey) = (self.b.x - self.a.x, self.b.y - self.a.y);
        let len2 = ex * ex + ey * ey;
        if len2 == 0.0 {
            return self.a;
        }
        let t = (((p.x - self.a.x) * ex + (p.y - self.a.y) * ey) / len2).clamp(0.0, 1.0);
        Point::new(self.a.x + t * ex, self.a.y + t * ey)
    }

    pub fn distance_to(&self, p: Point) -> f64 {
        self.closest_point(p).dist(p)
    }
}

fn cross(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    ax * by - ay * bx
}

/// Distance along the ray `origin + t·(dx, dy)` (unit direction) to `seg`, if hit.
pub fn ray_segment(origin: Point, dx: f64, dy: f64, seg: &Segment) -> Option<f64> {
    let (ex, ey) = (seg.b.x - seg.a.x, seg.b.y - seg.a.y);
    let denom = cross(dx, dy, ex, ey);
    if denom.abs() < 1e-12 {
        return None;
    }
    let (wx, wy) = (seg.a.x - origin.x, seg.a.y - origin.y);
    let t = cross(wx, wy, ex, ey) / denom;
    let s = cross(wx, wy, dx, dy) / denom;
    if t >= 0.0 && (0.0..=1.0).contains(&s) {
        Some(t)
    } else {
        None
    }
}

/// Distance along a unit-direction ray to the boundary of a disc, if hit.
/// An origin inside the disc reports distance 0.
pub fn ray_circle(origin: Point, dx: f64, dy: f64, center: Point, radius: f64) -> Option<f64> {
    let (fx, fy) = (origin.x - center.x, origin.y - center.y);
    let c = fx * fx + fy * fy - radius * radius;
    if c <= 0.0 {
        return Some(0.0);
    }
    let b = fx * dx + fy * dy;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t >= 0.0).then_some(t)
}

fn segments_intersect(p: &Segment, q: &Segment) -> bool {
    let d1 = cross(q.b.x - q.a.x, q.b.y - q.a.y, p.a.x - q.a.x, p.a.y - q.a.y);
    let d2 = cross(q.b.x - q.a.x, q.b.y - q.a.y, p.b.x - q.a.x, p.b.y - q.a.y);
    let d3 = cross(p.b.x - p.a.x, p.b.y - p.a.y, q.a.x - p.a.x, q.a.y - p.a.y);
    let d4 = cross(p.b.x - p.a.x, p.b.y - p.a.y, q.b.x - p.a.x, q.b.y - p.a.y);
    ((d1 > 0.0) != (d2 > 0.0)) && ((d3 > 0.0) != (d4 > 0.0))
}

/// Minimum distance between two segments.
pub fn segment_distance(p: &Segment, q: &Segment) -> f64 {
    if segments_intersect(p, q) {
        return 0.0;
    }
    q.distance_to(p.a)
        .min(q.distance_to(p.b))
        .min(p.distance_to(q.a))
        .min(p.distance_to(q.b))
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}
