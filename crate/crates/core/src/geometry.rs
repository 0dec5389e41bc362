//! Planar points, rigid transforms and footprint shapes.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// A point (or free vector) in the plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2<S = f64> {
    pub x: S,
    pub y: S,
}

impl<S: Scalar> Point2<S> {
    pub fn new(x: S, y: S) -> Self {
        Self { x, y }
    }

    pub fn zero() -> Self {
        Self::new(S::zero(), S::zero())
    }

    pub fn dot(self, other: Self) -> S {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> S {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Self) -> S {
        (self - other).norm()
    }

    /// Unit vector at `angle` radians from the +x axis.
    pub fn from_angle(angle: S) -> Self {
        Self::new(angle.cos(), angle.sin())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn cast<T: Scalar>(self) -> Point2<T> {
        Point2::new(T::lit(self.x.as_f64()), T::lit(self.y.as_f64()))
    }
}

impl<S: Scalar> Add for Point2<S> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl<S: Scalar> Sub for Point2<S> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl<S: Scalar> Mul<S> for Point2<S> {
    type Output = Self;
    fn mul(self, rhs: S) -> Self {
        Self::new(self.x * rhs, self.y * rhs)
    }
}

impl<S: Scalar> Neg for Point2<S> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

/// Proper rigid motion of the plane: `p ↦ R·p + T`.
///
/// `rotation` is stored row-major and is kept orthonormal with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform2D<S = f64> {
    pub rotation: [[S; 2]; 2],
    pub translation: Point2<S>,
}

impl<S: Scalar> RigidTransform2D<S> {
    pub fn identity() -> Self {
        Self::from_angle(S::zero(), Point2::zero())
    }

    /// Counter-clockwise rotation by `angle` radians followed by `translation`.
    pub fn from_angle(angle: S, translation: Point2<S>) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: [[c, -s], [s, c]],
            translation,
        }
    }

    pub fn angle(&self) -> S {
        self.rotation[1][0].atan2(self.rotation[0][0])
    }

    pub fn rotate(&self, v: Point2<S>) -> Point2<S> {
        let r = &self.rotation;
        Point2::new(r[0][0] * v.x + r[0][1] * v.y, r[1][0] * v.x + r[1][1] * v.y)
    }

    /// Applies the transpose of the rotation (its inverse).
    pub fn rotate_inverse(&self, v: Point2<S>) -> Point2<S> {
        let r = &self.rotation;
        Point2::new(r[0][0] * v.x + r[1][0] * v.y, r[0][1] * v.x + r[1][1] * v.y)
    }

    pub fn transform_point(&self, p: Point2<S>) -> Point2<S> {
        self.rotate(p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let rt = [[r[0][0], r[1][0]], [r[0][1], r[1][1]]];
        let inv = Self {
            rotation: rt,
            translation: Point2::zero(),
        };
        Self {
            rotation: rt,
            translation: -inv.rotate(self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut rotation = [[S::zero(); 2]; 2];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Self {
            rotation,
            translation: self.transform_point(other.translation),
        }
    }

    /// Orthonormality and unit determinant within `tol`.
    pub fn is_valid(&self, tol: S) -> bool {
        let r = &self.rotation;
        let det = r[0][0] * r[1][1] - r[0][1] * r[1][0];
        let c0 = r[0][0] * r[0][0] + r[1][0] * r[1][0];
        let c1 = r[0][1] * r[0][1] + r[1][1] * r[1][1];
        let cross = r[0][0] * r[0][1] + r[1][0] * r[1][1];
        (det - S::one()).abs() <= tol
            && (c0 - S::one()).abs() <= tol
            && (c1 - S::one()).abs() <= tol
            && cross.abs() <= tol
            && self.translation.is_finite()
    }
}

impl<S: Scalar> Default for RigidTransform2D<S> {
    fn default() -> Self {
        Self::identity()
    }
}

/// Returns `t·p = R·p + T`.
pub fn transform_point<S: Scalar>(t: &RigidTransform2D<S>, p: Point2<S>) -> Point2<S> {
    t.transform_point(p)
}

/// Position plus heading; the serialized form of a sensor or agent pose.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    /// Local-to-world transform of this pose.
    pub fn to_transform(&self) -> RigidTransform2D {
        RigidTransform2D::from_angle(self.heading, self.position())
    }
}

/// Axis-aligned rectangle in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

    pub fn center(&self) -> Point2 {
        Point2::new(
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    /// True when the open interiors overlap.
    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x_min < other.x_max
            && other.x_min < self.x_max
            && self.y_min < other.y_max
            && other.y_min < self.y_max
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Whether the segment `a`–`b` touches the rectangle (slab clipping).
    pub fn intersects_segment(&self, a: Point2, b: Point2) -> bool {
        let d = b - a;
        let mut t0 = 0.0_f64;
        let mut t1 = 1.0_f64;
        for (p0, dp, lo, hi) in [
            (a.x, d.x, self.x_min, self.x_max),
            (a.y, d.y, self.y_min, self.y_max),
        ] {
            if dp.abs() < 1e-15 {
                if p0 < lo || p0 > hi {
                    return false;
                }
            } else {
                let mut ta = (lo - p0) / dp;
                let mut tb = (hi - p0) / dp;
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

/// Oriented rectangle: an agent's BEV footprint at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Point2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn contains(&self, p: Point2) -> bool {
        let d = p - self.center;
        let (s, c) = self.heading.sin_cos();
        let along = d.x * c + d.y * s;
        let across = -d.x * s + d.y * c;
        along.abs() <= 0.5 * self.length && across.abs() <= 0.5 * self.width
    }

    pub fn corners(&self) -> [Point2; 4] {
        let fwd = Point2::from_angle(self.heading) * (0.5 * self.length);
        let left =
            Point2::from_angle(self.heading + std::f64::consts::FRAC_PI_2) * (0.5 * self.width);
        [
            self.center + fwd + left,
            self.center + fwd - left,
            self.center - fwd - left,
            self.center - fwd + left,
        ]
    }

    pub fn bounding_rect(&self) -> Rect {
        let c = self.corners();
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in c {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        Rect::new(x0, y0, x1, y1)
    }

    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }
}
