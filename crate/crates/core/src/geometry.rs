//! Exact 2D primitives used by the collision metrics.
//!
//! Trajectories are open polylines in image-plane pixels, obstacles are
//! closed axis-aligned boxes. Intersection and clipped length are computed
//! per segment with Liang-Barsky parametric clipping, so both are exact up to
//! floating-point rounding.

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Segments shorter than this (in pixels) contribute no clipped length.
pub const DEGENERATE_SEGMENT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Point2 {
        Point2::new(self.x + dx, self.y + dy)
    }
}

impl From<(f64, f64)> for Point2 {
    fn from((x, y): (f64, f64)) -> Self {
        Point2::new(x, y)
    }
}

/// An open chain of at least two finite points.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<Point2>,
}

impl Polyline {
    pub fn new(points: Vec<Point2>) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinitePoint(i));
        }
        Ok(Self { points })
    }

    pub fn from_xy(coords: &[(f64, f64)]) -> Result<Self, GeometryError> {
        Self::new(coords.iter().copied().map(Point2::from).collect())
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn segments(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Polyline {
        Polyline {
            points: self.points.iter().map(|p| p.translate(dx, dy)).collect(),
        }
    }
}

/// Image size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub width: f64,
    pub height: f64,
}

impl Resolution {
    pub const fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }

    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= 0.0 && p.x <= self.width && p.y >= 0.0 && p.y <= self.height
    }
}

/// Ordered waypoints in image-plane (or normalized) coordinates. Unlike
/// [`Polyline`] a single point is allowed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory(pub Vec<Point2>);

impl Trajectory {
    pub fn new(points: Vec<Point2>) -> Self {
        Self(points)
    }

    pub fn from_xy(coords: &[(f64, f64)]) -> Self {
        Self(coords.iter().copied().map(Point2::from).collect())
    }

    pub fn points(&self) -> &[Point2] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Point2::is_finite)
    }

    /// Divide x by `width` and y by `height`.
    pub fn normalized(&self, width: f64, height: f64) -> Trajectory {
        Trajectory(self.0.iter().map(|p| Point2::new(p.x / width, p.y / height)).collect())
    }

    pub fn to_polyline(&self) -> Result<Polyline, GeometryError> {
        Polyline::new(self.0.clone())
    }
}

/// Closed axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct AABox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl TryFrom<RawBox> for AABox {
    type Error = GeometryError;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        AABox::new(raw.x_min, raw.y_min, raw.x_max, raw.y_max)
    }
}

impl From<AABox> for RawBox {
    fn from(b: AABox) -> Self {
        RawBox {
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
        }
    }
}

impl AABox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn translate(&self, dx: f64, dy: f64) -> AABox {
        AABox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }
}

/// Parametric interval `[t0, t1]` of the segment `a -> b` lying inside the
/// closed box, or `None` when the segment misses it.
fn clip_segment(a: Point2, b: Point2, bx: &AABox) -> Option<(f64, f64)> {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    let edges = [
        (-dx, a.x - bx.x_min),
        (dx, bx.x_max - a.x),
        (-dy, a.y - bx.y_min),
        (dy, bx.y_max - a.y),
    ];
    let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
    for (p, q) in edges {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

/// True iff some segment touches or enters the closed box.
pub fn intersects(poly: &Polyline, bx: &AABox) -> bool {
    poly.segments().any(|(a, b)| {
        if a.distance(&b) < DEGENERATE_SEGMENT_EPS {
            bx.contains(&a)
        } else {
            clip_segment(a, b, bx).is_some()
        }
    })
}

/// Total length of the polyline inside the closed box.
pub fn clip_length(poly: &Polyline, bx: &AABox) -> f64 {
    poly.segments()
        .map(|(a, b)| {
            let len = a.distance(&b);
            if len < DEGENERATE_SEGMENT_EPS {
                return 0.0;
            }
            clip_segment(a, b, bx).map_or(0.0, |(t0, t1)| (t1 - t0) * len)
        })
        .sum()
}

pub fn polyline_length(poly: &Polyline) -> f64 {
    poly.segments().map(|(a, b)| a.distance(&b)).sum()
}
