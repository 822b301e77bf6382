use crate::geometry::Point2;

use super::MatchError;

/// A single planar LiDAR sweep in polar form.
///
/// Ray `i` points along `angle_min + i * angle_increment`. A return is valid
/// iff `0 < range <= range_max`; anything else (NaN, Inf, zero, negative,
/// beyond max range) marks a missing return.
#[derive(Debug, Clone, PartialEq)]
pub struct LaserScan {
    pub timestamp: f64,
    pub angle_min: f64,
    pub angle_increment: f64,
    pub range_max: f64,
    pub ranges: Vec<f64>,
}

impl LaserScan {
    pub fn new(
        timestamp: f64,
        angle_min: f64,
        angle_increment: f64,
        range_max: f64,
        ranges: Vec<f64>,
    ) -> Result<Self, MatchError> {
        let scan = Self {
            timestamp,
            angle_min,
            angle_increment,
            range_max,
            ranges,
        };
        scan.validate()?;
        Ok(scan)
    }

    pub fn validate(&self) -> Result<(), MatchError> {
        if self.ranges.len() < 2 {
            return Err(MatchError::InvalidScan("fewer than 2 rays".into()));
        }
        if !(self.angle_increment > 0.0) || !self.angle_increment.is_finite() {
            return Err(MatchError::InvalidScan(format!(
                "angle_increment must be positive, got {}",
                self.angle_increment
            )));
        }
        if !self.angle_min.is_finite() || !self.timestamp.is_finite() {
            return Err(MatchError::InvalidScan("non-finite header".into()));
        }
        if !(self.range_max > 0.0) {
            return Err(MatchError::InvalidScan(format!(
                "range_max must be positive, got {}",
                self.range_max
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn ray_angle(&self, i: usize) -> f64 {
        self.angle_min + i as f64 * self.angle_increment
    }

    pub fn is_valid(&self, i: usize) -> bool {
        let r = self.ranges[i];
        r > 0.0 && r <= self.range_max
    }

    pub fn num_valid(&self) -> usize {
        (0..self.ranges.len()).filter(|&i| self.is_valid(i)).count()
    }
}

/// A valid return in Cartesian form together with its radial
/// decomposition `point = range * direction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPoint {
    pub point: Point2,
    /// Index of the originating ray.
    pub ray: usize,
    pub range: f64,
    /// Unit bearing vector.
    pub direction: Point2,
}

impl ScanPoint {
    pub fn from_polar(ray: usize, range: f64, angle: f64) -> Self {
        let direction = Point2::from_polar(1.0, angle);
        Self {
            point: direction.scale(range),
            ray,
            range,
            direction,
        }
    }

    /// Radial decomposition of an arbitrary (non-origin) point.
    pub fn from_point(ray: usize, point: Point2) -> Self {
        let range = point.norm();
        Self {
            point,
            ray,
            range,
            direction: point.scale(1.0 / range),
        }
    }
}

/// Converts every valid ray to a Cartesian point, keeping its ray index.
pub fn scan_to_points(scan: &LaserScan) -> Vec<ScanPoint> {
    (0..scan.ranges.len())
        .filter(|&i| scan.is_valid(i))
        .map(|i| ScanPoint::from_polar(i, scan.ranges[i], scan.ray_angle(i)))
        .collect()
}
