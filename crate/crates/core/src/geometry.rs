//! SE(2) pose algebra.
//!
//! Poses are stored as `(x, y, theta)` with `theta` always wrapped into
//! `(-pi, pi]`. Composition follows the usual convention: `a.compose(b)` is
//! the pose `b` expressed in the frame in which `a` is expressed, i.e. the
//! translation of `b` is rotated by `a.theta` and added to `a`'s translation.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix2, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite value {0}")]
    NonFinite(f64),
}

/// Wraps an angle into `(-pi, pi]`.
///
/// Non-finite input is rejected; see [`wrap_angle`] for the unchecked variant
/// used on hot paths.
pub fn normalize_angle(a: f64) -> Result<f64, GeometryError> {
    if !a.is_finite() {
        return Err(GeometryError::NonFinite(a));
    }
    Ok(wrap_angle(a))
}

/// Unchecked [`normalize_angle`]; NaN propagates.
#[inline]
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_polar(range: f64, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(range * c, range * s)
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(&self, other: &Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn distance_squared(&self, other: &Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn sub(&self, other: &Point2) -> Point2 {
        Point2::new(self.x - other.x, self.y - other.y)
    }

    pub fn add(&self, other: &Point2) -> Point2 {
        Point2::new(self.x + other.x, self.y + other.y)
    }

    pub fn scale(&self, k: f64) -> Point2 {
        Point2::new(self.x * k, self.y * k)
    }

    /// Rotation by +90 degrees.
    pub fn perp(&self) -> Point2 {
        Point2::new(-self.y, self.x)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

impl From<Vector2<f64>> for Point2 {
    fn from(v: Vector2<f64>) -> Self {
        Point2::new(v.x, v.y)
    }
}

/// A rigid motion in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl fmt::Display for Pose2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6}, {:.6})", self.x, self.y, self.theta)
    }
}

impl Pose2 {
    /// Builds a pose, wrapping `theta`.
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    /// Like [`Pose2::new`] but rejects NaN/Inf components.
    pub fn try_new(x: f64, y: f64, theta: f64) -> Result<Self, GeometryError> {
        for v in [x, y, theta] {
            if !v.is_finite() {
                return Err(GeometryError::NonFinite(v));
            }
        }
        Ok(Self::new(x, y, theta))
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn translation(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn translation_norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn rotation_matrix(&self) -> Matrix2<f64> {
        rotation(self.theta)
    }

    /// `self ⊕ other`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            -(c * self.x + s * self.y),
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// `other` expressed in the frame of `self`: `self⁻¹ ⊕ other`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        let dx = other.x - self.x;
        let dy = other.y - self.y;
        Pose2::new(c * dx + s * dy, -s * dx + c * dy, other.theta - self.theta)
    }

    pub fn transform_point(&self, p: &Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        Point2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Pose2 {
        Pose2::new(v.x, v.y, v.z)
    }
}

pub fn compose(a: &Pose2, b: &Pose2) -> Pose2 {
    a.compose(b)
}

pub fn inverse(a: &Pose2) -> Pose2 {
    a.inverse()
}

pub fn between(a: &Pose2, b: &Pose2) -> Pose2 {
    a.between(b)
}

pub fn transform_point(q: &Pose2, p: &Point2) -> Point2 {
    q.transform_point(p)
}

pub fn rotation(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}
