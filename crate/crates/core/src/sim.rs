//! Polygon-world LiDAR simulator.
//!
//! Worlds are sets of wall segments. Range noise is drawn from a
//! ChaCha8 stream seeded by the caller, so a `(world, trajectory, spec, seed)`
//! tuple always produces the same scans on every platform.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::eval::Trajectory;
use crate::geometry::{Point2, Pose2};
use crate::matching::LaserScan;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("world has no segments")]
    EmptyWorld,
    #[error("invalid lidar spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Point2,
    pub b: Point2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub name: String,
    pub segments: Vec<Segment>,
}

impl World {
    pub fn new(name: impl Into<String>, segments: Vec<Segment>) -> Result<Self, SimError> {
        if segments.is_empty() {
            return Err(SimError::EmptyWorld);
        }
        Ok(Self {
            name: name.into(),
            segments,
        })
    }
}

/// Parses a segment file: one `x1 y1 x2 y2` per line, `#` comments allowed.
pub fn parse_world(name: &str, text: &str) -> Result<World, SimError> {
    let mut segments = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| SimError::Parse { line: idx + 1, msg };
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| err(format!("{t:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if vals.len() != 4 {
            return Err(err(format!("expected 4 numbers, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite coordinate".into()));
        }
        segments.push(Segment {
            a: Point2::new(vals[0], vals[1]),
            b: Point2::new(vals[2], vals[3]),
        });
    }
    World::new(name, segments)
}

/// Serializes a world in the format read by [`parse_world`].
pub fn format_world(world: &World) -> String {
    let mut out = String::new();
    for s in &world.segments {
        out.push_str(&format!("{} {} {} {}\n", s.a.x, s.a.y, s.b.x, s.b.y));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarSpec {
    /// Total field of view, radians, centered on the heading.
    pub coverage: f64,
    pub increment: f64,
    pub range_max: f64,
    pub rate: f64,
    pub range_noise_sigma: f64,
}

impl Default for LidarSpec {
    /// 270° at 0.25°, 60 m, 40 Hz, 3 cm noise.
    fn default() -> Self {
        Self {
            coverage: 1.5 * PI,
            increment: 0.25f64.to_radians(),
            range_max: 60.0,
            rate: 40.0,
            range_noise_sigma: 0.03,
        }
    }
}

impl LidarSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidSpec(m.into()));
        for v in [self.coverage, self.increment, self.range_max, self.rate] {
            if !(v > 0.0) || !v.is_finite() {
                return bad("coverage, increment, range_max and rate must be positive");
            }
        }
        if !(self.range_noise_sigma >= 0.0) {
            return bad("noise sigma must be non-negative");
        }
        let steps = self.coverage / self.increment;
        if (steps - steps.round()).abs() > 1e-6 {
            return bad("coverage is not a whole number of increments");
        }
        Ok(())
    }

    pub fn num_rays(&self) -> usize {
        (self.coverage / self.increment).round() as usize + 1
    }

    pub fn angle_min(&self) -> f64 {
        -0.5 * self.coverage
    }
}

/// Distance along the ray `origin + s·dir` (with `dir` unit) to segment `seg`,
/// if it is hit at `s > 0`.
pub fn ray_segment_distance(origin: &Point2, dir: &Point2, seg: &Segment) -> Option<f64> {
    let e = seg.b.sub(&seg.a);
    let denom = dir.x * e.y - dir.y * e.x;
    if denom == 0.0 {
        return None;
    }
    let w = seg.a.sub(origin);
    let s = (w.x * e.y - w.y * e.x) / denom;
    let u = (w.x * dir.y - w.y * dir.x) / denom;
    (s > 0.0 && (0.0..=1.0).contains(&u)).then_some(s)
}

fn cast(world: &World, origin: &Point2, dir: &Point2, range_max: f64) -> f64 {
    let nearest = world
        .segments
        .iter()
        .filter_map(|s| ray_segment_distance(origin, dir, s))
        .fold(f64::INFINITY, f64::min);
    if nearest <= range_max {
        nearest
    } else {
        f64::NAN
    }
}

/// Noise-free scan from `pose`. Rays that hit nothing within range are NaN.
pub fn raycast_exact(world: &World, pose: &Pose2, spec: &LidarSpec, timestamp: f64) -> LaserScan {
    let origin = pose.translation();
    let ranges = (0..spec.num_rays())
        .map(|i| {
            let a = pose.theta + spec.angle_min() + i as f64 * spec.increment;
            cast(world, &origin, &Point2::from_polar(1.0, a), spec.range_max)
        })
        .collect();
    LaserScan {
        timestamp,
        angle_min: spec.angle_min(),
        angle_increment: spec.increment,
        range_max: spec.range_max,
        ranges,
    }
}

/// [`raycast_exact`] plus Gaussian range noise, clipped to `(0, range_max]`.
pub fn raycast(world: &World, pose: &Pose2, spec: &LidarSpec, timestamp: f64, rng: &mut ChaCha8Rng) -> LaserScan {
    let mut scan = raycast_exact(world, pose, spec, timestamp);
    if spec.range_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.range_noise_sigma).expect("sigma validated");
        for r in scan.ranges.iter_mut() {
            // Draw for every ray so the stream does not depend on the scene.
            let n = normal.sample(rng);
            if r.is_finite() {
                *r = (*r + n).clamp(f64::MIN_POSITIVE, spec.range_max);
            }
        }
    }
    scan
}

/// One noisy scan per trajectory sample.
pub fn generate_scans(world: &World, trajectory: &Trajectory, spec: &LidarSpec, seed: u64) -> Vec<LaserScan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    trajectory
        .samples()
        .iter()
        .map(|(t, p)| raycast(world, p, spec, *t, &mut rng))
        .collect()
}

/// File names written by [`generate_log`].
pub const SCAN_LOG_FILE: &str = "scans.log";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.txt";

/// Writes `scans.log` and `ground_truth.txt` into `dir`, which must exist.
pub fn generate_log(
    world: &World,
    trajectory: &Trajectory,
    spec: &LidarSpec,
    seed: u64,
    dir: impl AsRef<std::path::Path>,
) -> Result<Vec<LaserScan>, crate::io::IoError> {
    let dir = dir.as_ref();
    let scans = generate_scans(world, trajectory, spec, seed);
    crate::io::write_scan_log(dir.join(SCAN_LOG_FILE), &scans)?;
    crate::io::write_trajectory(dir.join(GROUND_TRUTH_FILE), trajectory)?;
    Ok(scans)
}

pub mod fixtures {
    //! Bundled worlds and matching trajectories.

    use super::*;

    pub const VALLEY: &str = include_str!("../worlds/valley.txt");
    pub const BOX_ROOM: &str = include_str!("../worlds/box_room.txt");
    pub const HALL: &str = include_str!("../worlds/hall.txt");

    /// Ring corridor in a 50 m square.
    pub fn valley() -> World {
        parse_world("valley", VALLEY).expect("bundled world parses")
    }

    /// Empty 10 m room with corners at (0,0) and (10,10).
    pub fn box_room() -> World {
        parse_world("box_room", BOX_ROOM).expect("bundled world parses")
    }

    /// Straight 17 m by 4 m hall along x with a few pillars, for straight runs
    /// from about (0, 0).
    pub fn hall() -> World {
        parse_world("hall", HALL).expect("bundled world parses")
    }

    // Corridor centerline of the valley: an ellipse about (25, 25).
    const CENTER: (f64, f64) = (25.0, 25.0);
    const SEMI_AXES: (f64, f64) = (14.0, 11.0);

    /// Counter-clockwise drive along the valley centerline starting at the
    /// bottom of the ring, sampled at `rate` Hz with constant `speed`, for
    /// `laps` laps (fractions allowed). Heading follows the tangent.
    pub fn valley_loop(rate: f64, speed: f64, laps: f64) -> Trajectory {
        let (cx, cy) = CENTER;
        let (a, b) = SEMI_AXES;
        let at = |phi: f64| Point2::new(cx + a * phi.cos(), cy + b * phi.sin());
        // arc-length table
        let n = 20000;
        let start = -0.5 * PI;
        let mut table = Vec::with_capacity(n + 1);
        let mut s = 0.0;
        let mut prev = at(start);
        table.push((0.0, start));
        for k in 1..=n {
            let phi = start + 2.0 * PI * k as f64 / n as f64;
            let p = at(phi);
            s += p.distance(&prev);
            prev = p;
            table.push((s, phi));
        }
        let perimeter = s;
        let total = perimeter * laps;
        let count = (total / speed * rate).floor() as usize + 1;
        let mut samples = Vec::with_capacity(count);
        for k in 0..count {
            let t = k as f64 / rate;
            let dist = speed * t;
            let lap = (dist / perimeter).floor();
            let within = dist - lap * perimeter;
            let idx = table.partition_point(|(d, _)| *d < within).clamp(1, n);
            let (d0, p0) = table[idx - 1];
            let (d1, p1) = table[idx];
            let phi = p0 + (p1 - p0) * (within - d0) / (d1 - d0).max(1e-15);
            let pos = at(phi);
            let heading = (b * phi.cos()).atan2(-a * phi.sin());
            samples.push((t, Pose2::new(pos.x, pos.y, heading)));
        }
        Trajectory::new(samples).expect("monotone timestamps")
    }

    /// Counter-clockwise circle of `radius` about `center`, starting at its
    /// lowest point heading +x, for `turns` turns.
    pub fn circle(center: Point2, radius: f64, rate: f64, speed: f64, turns: f64) -> Trajectory {
        let length = 2.0 * PI * radius * turns;
        let count = (length / speed * rate).floor() as usize + 1;
        let samples = (0..count)
            .map(|k| {
                let t = k as f64 / rate;
                let phi = speed * t / radius - 0.5 * PI;
                let p = Pose2::new(center.x + radius * phi.cos(), center.y + radius * phi.sin(), phi + 0.5 * PI);
                (t, p)
            })
            .collect();
        Trajectory::new(samples).expect("monotone timestamps")
    }

    /// Straight drive along +x from `start`.
    pub fn straight(start: Pose2, length: f64, rate: f64, speed: f64) -> Trajectory {
        let count = (length / speed * rate).round() as usize + 1;
        let samples = (0..count)
            .map(|k| {
                let t = k as f64 / rate;
                let d = (speed * t).min(length);
                (t, start.compose(&Pose2::new(d, 0.0, 0.0)))
            })
            .collect();
        Trajectory::new(samples).expect("monotone timestamps")
    }
}
