//! Planar primitives shared by propagation, sensing and relay logic.
//!
//! Everything here works in a flat world frame measured in meters. Heights
//! are carried alongside the 2D shapes (2.5D): a [`Footprint`] is a convex
//! prism, an [`AntennaPoint`] is a position plus mast height.
//!
//! All predicates use a fixed tolerance of [`EPS`] meters. Segments that only
//! graze a footprint (touch a vertex, run along an edge) are treated as not
//! intersecting it, so that measure-zero contacts never flip a link budget
//! between two time steps.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Geometric tolerance in meters.
pub const EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("footprint needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("footprint is not strictly convex")]
    NotConvex,
    #[error("footprint height must be positive, got {0}")]
    NonPositiveHeight(f64),
    #[error("non-finite coordinate")]
    NonFinite,
}

/// A position in the world frame (meters).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

/// A displacement or velocity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point2) -> f64 {
        (other - self).norm()
    }

    /// Point at fraction `t` of the way from `self` to `other`.
    pub fn lerp(self, other: Point2, t: f64) -> Point2 {
        self + (other - self) * t
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Unit vector pointing along `heading` (radians, counter-clockwise from +x).
    pub fn from_heading(heading: f64) -> Self {
        Self::new(heading.cos(), heading.sin())
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }
}

impl Sub for Point2 {
    type Output = Vec2;
    fn sub(self, o: Point2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Add<Vec2> for Point2 {
    type Output = Point2;
    fn add(self, v: Vec2) -> Point2 {
        Point2::new(self.x + v.x, self.y + v.y)
    }
}

impl Sub<Vec2> for Point2 {
    type Output = Point2;
    fn sub(self, v: Vec2) -> Point2 {
        Point2::new(self.x - v.x, self.y - v.y)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Axis-aligned bounding box, used to reject far-away shapes early.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point2,
    pub max: Point2,
}

impl Aabb {
    pub fn of_points<'a>(pts: impl IntoIterator<Item = &'a Point2>) -> Aabb {
        let mut min = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut max = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in pts {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
        }
        Aabb { min, max }
    }

    /// Whether segment `a`→`b` can touch this box (slab test, inclusive).
    pub fn may_intersect_segment(&self, a: Point2, b: Point2) -> bool {
        let seg = Aabb::of_points([&a, &b]);
        if seg.max.x < self.min.x - EPS
            || seg.min.x > self.max.x + EPS
            || seg.max.y < self.min.y - EPS
            || seg.min.y > self.max.y + EPS
        {
            return false;
        }
        let d = b - a;
        let mut t0: f64 = 0.0;
        let mut t1: f64 = 1.0;
        for (o, dir, lo, hi) in [
            (a.x, d.x, self.min.x, self.max.x),
            (a.y, d.y, self.min.y, self.max.y),
        ] {
            if dir.abs() < f64::MIN_POSITIVE {
                if o < lo - EPS || o > hi + EPS {
                    return false;
                }
            } else {
                let (mut ta, mut tb) = ((lo - EPS - o) / dir, (hi + EPS - o) / dir);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }
}

/// Convex prism: counter-clockwise outline plus a height above ground.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FootprintRepr", into = "FootprintRepr")]
pub struct Footprint {
    vertices: Vec<Point2>,
    height: f64,
    bbox: Aabb,
}

#[derive(Serialize, Deserialize)]
struct FootprintRepr {
    vertices: Vec<Point2>,
    height: f64,
}

impl TryFrom<FootprintRepr> for Footprint {
    type Error = GeometryError;
    fn try_from(r: FootprintRepr) -> Result<Self, Self::Error> {
        Footprint::new(r.vertices, r.height)
    }
}

impl From<Footprint> for FootprintRepr {
    fn from(f: Footprint) -> Self {
        FootprintRepr {
            vertices: f.vertices,
            height: f.height,
        }
    }
}

impl Footprint {
    /// Validates convexity; clockwise input is reoriented to counter-clockwise.
    pub fn new(mut vertices: Vec<Point2>, height: f64) -> Result<Self, GeometryError> {
        if vertices.len() < 3 {
            return Err(GeometryError::TooFewVertices(vertices.len()));
        }
        if !vertices.iter().all(|p| p.is_finite()) || !height.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if height <= 0.0 {
            return Err(GeometryError::NonPositiveHeight(height));
        }
        let n = vertices.len();
        let turns: Vec<f64> = (0..n)
            .map(|i| {
                let (p, q, r) = (vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]);
                (q - p).cross(r - q)
            })
            .collect();
        let all_left = turns.iter().all(|&c| c > EPS);
        let all_right = turns.iter().all(|&c| c < -EPS);
        if !all_left && !all_right {
            return Err(GeometryError::NotConvex);
        }
        if all_right {
            vertices.reverse();
        }
        let bbox = Aabb::of_points(&vertices);
        Ok(Self {
            vertices,
            height,
            bbox,
        })
    }

    /// Oriented box centered at `center` with its length along `heading`.
    pub fn oriented_box(
        center: Point2,
        heading: f64,
        length: f64,
        width: f64,
        height: f64,
    ) -> Result<Self, GeometryError> {
        let fwd = Vec2::from_heading(heading) * (length / 2.0);
        let left = Vec2::from_heading(heading).perp() * (width / 2.0);
        Self::new(
            vec![
                center - fwd - left,
                center + fwd - left,
                center + fwd + left,
                center - fwd + left,
            ],
            height,
        )
    }

    pub fn axis_aligned(min: Point2, max: Point2, height: f64) -> Result<Self, GeometryError> {
        Self::new(
            vec![
                min,
                Point2::new(max.x, min.y),
                max,
                Point2::new(min.x, max.y),
            ],
            height,
        )
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Strictly inside, farther than [`EPS`] from every edge.
    pub fn contains_strict(&self, p: Point2) -> bool {
        self.edges().all(|(u, v)| {
            let e = v - u;
            e.cross(p - u) / e.norm() > EPS
        })
    }

    /// Parameter interval `[t_in, t_out] ⊂ [0, 1]` of the segment `a`→`b`
    /// lying inside the footprint, or `None` when the segment misses it or
    /// merely grazes its boundary.
    pub fn clip_segment(&self, a: Point2, b: Point2) -> Option<(f64, f64)> {
        if !self.bbox.may_intersect_segment(a, b) {
            return None;
        }
        let d = b - a;
        let mut t_in: f64 = 0.0;
        let mut t_out: f64 = 1.0;
        for (u, v) in self.edges() {
            let e = v - u;
            let len = e.norm();
            // Signed distance of p(t) to the edge line, positive inside.
            let f0 = e.cross(a - u) / len;
            let df = e.cross(d) / len;
            if df.abs() < f64::MIN_POSITIVE {
                if f0 < 0.0 {
                    return None;
                }
                continue;
            }
            let t = -f0 / df;
            if df > 0.0 {
                t_in = t_in.max(t);
            } else {
                t_out = t_out.min(t);
            }
            if t_in > t_out {
                return None;
            }
        }
        let seg_len = d.norm();
        if (t_out - t_in) * seg_len <= EPS {
            return None;
        }
        // Reject chords that run along the boundary instead of through the interior.
        let mid = a.lerp(b, 0.5 * (t_in + t_out));
        if !self.contains_strict(mid) {
            return None;
        }
        Some((t_in, t_out))
    }

    /// Whether the interiors of two convex shapes overlap with positive area.
    pub fn overlaps(&self, other: &Footprint) -> bool {
        if self.bbox.max.x <= other.bbox.min.x + EPS
            || other.bbox.max.x <= self.bbox.min.x + EPS
            || self.bbox.max.y <= other.bbox.min.y + EPS
            || other.bbox.max.y <= self.bbox.min.y + EPS
        {
            return false;
        }
        for shape in [self, other] {
            for (u, v) in shape.edges() {
                let axis = (v - u).perp();
                let project = |f: &Footprint| {
                    f.vertices.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                        let s = axis.dot(*p - Point2::ORIGIN);
                        (lo.min(s), hi.max(s))
                    })
                };
                let (a0, a1) = project(self);
                let (b0, b1) = project(other);
                let scale = axis.norm();
                if (a1.min(b1) - a0.max(b0)) / scale <= EPS {
                    return false;
                }
            }
        }
        true
    }

    pub fn centroid(&self) -> Point2 {
        let n = self.vertices.len() as f64;
        let (sx, sy) = self
            .vertices
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point2::new(sx / n, sy / n)
    }
}

/// A radio antenna: ground position and mast height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AntennaPoint {
    pub position: Point2,
    pub antenna_height: f64,
}

impl AntennaPoint {
    pub fn new(position: Point2, antenna_height: f64) -> Self {
        debug_assert!(antenna_height > 0.0);
        Self {
            position,
            antenna_height,
        }
    }
}

/// Number of boundary crossings of segment `a`→`b` through `f`.
///
/// An entry and an exit each count once; an endpoint strictly inside the
/// footprint therefore yields a single crossing. Grazing contact counts zero.
pub fn segment_footprint_crossings(a: Point2, b: Point2, f: &Footprint) -> u32 {
    let Some((t_in, t_out)) = f.clip_segment(a, b) else {
        return 0;
    };
    let len = (b - a).norm();
    let entry = t_in * len > EPS;
    let exit = (1.0 - t_out) * len > EPS;
    u32::from(entry) + u32::from(exit)
}

/// Knife-edge split of a link by one obstacle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSplit {
    /// Distance from the first endpoint to the obstacle peak.
    pub d1: f64,
    /// Distance from the obstacle peak to the second endpoint.
    pub d2: f64,
    pub peak: Point2,
}

/// Where the link `a`→`b` is cut by `f`, taking the midpoint of the chord
/// through the footprint as the single representative knife edge.
pub fn obstacle_split(a: &AntennaPoint, b: &AntennaPoint, f: &Footprint) -> Option<ObstacleSplit> {
    let (t_in, t_out) = f.clip_segment(a.position, b.position)?;
    let t = 0.5 * (t_in + t_out);
    let len = a.position.distance(b.position);
    let d1 = t * len;
    Some(ObstacleSplit {
        d1,
        d2: len - d1,
        peak: a.position.lerp(b.position, t),
    })
}

/// Height of the straight Tx–Rx line above ground at `p` (projected onto the link).
pub fn line_height_at(a: &AntennaPoint, b: &AntennaPoint, p: Point2) -> f64 {
    let d = b.position - a.position;
    let len2 = d.dot(d);
    let t = if len2 > 0.0 {
        ((p - a.position).dot(d) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    a.antenna_height + t * (b.antenna_height - a.antenna_height)
}

/// Synthetic 2D lidar: samples every `step` meters along `n_rays` evenly
/// spaced bearings until the first obstacle hit (included) or `max_range`.
///
/// Per ray the sample count never exceeds the unobstructed count, so adding
/// obstacles can only remove samples.
pub fn cast_rays(
    origin: Point2,
    obstacles: &[&Footprint],
    n_rays: usize,
    max_range: f64,
    step: f64,
) -> Vec<Point2> {
    assert!(n_rays >= 1, "need at least one ray");
    assert!(step > 0.0, "step must be positive");
    let free_samples = (max_range / step + EPS).floor().max(0.0) as usize;
    let mut out = Vec::with_capacity(n_rays * free_samples.min(256));
    let inside = obstacles.iter().any(|f| f.contains_strict(origin));
    for i in 0..n_rays {
        let dir = Vec2::from_heading(std::f64::consts::TAU * i as f64 / n_rays as f64);
        let far = origin + dir * max_range;
        let hit = if inside {
            Some(0.0)
        } else {
            obstacles
                .iter()
                .filter_map(|f| f.clip_segment(origin, far).map(|(t_in, _)| t_in * max_range))
                .min_by(f64::total_cmp)
        };
        match hit {
            None => out.extend((1..=free_samples).map(|k| origin + dir * (k as f64 * step))),
            Some(d) => {
                let before = (1..=free_samples).take_while(|&k| (k as f64) * step < d - EPS);
                let mut count = 0;
                for k in before {
                    out.push(origin + dir * (k as f64 * step));
                    count += 1;
                }
                if count < free_samples {
                    out.push(origin + dir * d);
                }
            }
        }
    }
    out
}
