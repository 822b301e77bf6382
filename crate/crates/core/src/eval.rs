//! Trajectory error metrics.
//!
//! [`ate`] rigidly aligns the estimate to the ground truth (rotation and
//! translation, no scale) and reports the RMSE of the remaining position
//! errors. [`rpe`] compares relative motions over a fixed step and is blind to
//! any constant offset of the whole estimate.

use thiserror::Error;

use crate::geometry::{Point2, Pose2};

/// Maximum timestamp difference for two samples to be associated, seconds.
pub const ASSOCIATION_WINDOW: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("timestamps must be finite and strictly increasing (sample {0})")]
    Unordered(usize),
    #[error("non-finite pose at sample {0}")]
    NonFinitePose(usize),
    #[error("only {0} associated samples, need at least 2")]
    TooFewAssociations(usize),
    #[error("no sample pairs at the requested step")]
    InsufficientPairs,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    samples: Vec<(f64, Pose2)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, Pose2)>) -> Result<Self, EvalError> {
        for (k, (t, p)) in samples.iter().enumerate() {
            if !t.is_finite() || (k > 0 && *t <= samples[k - 1].0) {
                return Err(EvalError::Unordered(k));
            }
            if !p.is_finite() {
                return Err(EvalError::NonFinitePose(k));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, Pose2)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn poses(&self) -> impl Iterator<Item = &Pose2> {
        self.samples.iter().map(|(_, p)| p)
    }

    /// Sum of translation lengths between consecutive samples.
    pub fn path_length(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| w[0].1.translation().distance(&w[1].1.translation()))
            .sum()
    }

    /// Index of the sample nearest to `t`, if within `window`.
    pub fn nearest(&self, t: f64, window: f64) -> Option<usize> {
        let k = self.samples.partition_point(|(s, _)| *s < t);
        let mut best: Option<(usize, f64)> = None;
        for idx in [k.wrapping_sub(1), k] {
            if let Some((s, _)) = self.samples.get(idx) {
                let d = (s - t).abs();
                if d <= window && best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((idx, d));
                }
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Pairs of (estimate, ground truth) poses with timestamps within
/// [`ASSOCIATION_WINDOW`].
pub fn associate(est: &Trajectory, gt: &Trajectory) -> Vec<(Pose2, Pose2)> {
    est.samples
        .iter()
        .filter_map(|(t, p)| gt.nearest(*t, ASSOCIATION_WINDOW).map(|k| (*p, gt.samples[k].1)))
        .collect()
}

/// Least-squares rigid motion mapping `from` onto `to`.
pub fn align_se2(from: &[Point2], to: &[Point2]) -> Pose2 {
    let n = from.len().max(1) as f64;
    let mf = from.iter().fold(Point2::default(), |a, p| a.add(p)).scale(1.0 / n);
    let mt = to.iter().fold(Point2::default(), |a, p| a.add(p)).scale(1.0 / n);
    let (mut sc, mut ss) = (0.0, 0.0);
    for (f, t) in from.iter().zip(to) {
        let f = f.sub(&mf);
        let t = t.sub(&mt);
        sc += f.x * t.x + f.y * t.y;
        ss += f.x * t.y - f.y * t.x;
    }
    let theta = ss.atan2(sc);
    let rotated = Pose2::new(0.0, 0.0, theta).transform_point(&mf);
    Pose2::new(mt.x - rotated.x, mt.y - rotated.y, theta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStats {
    pub rmse: f64,
    pub errors: Vec<f64>,
}

impl ErrorStats {
    fn from_errors(errors: Vec<f64>) -> Self {
        let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
        Self { rmse, errors }
    }

    pub fn mean(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.errors.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.errors.iter().fold(0.0, |m, e| m.max(*e))
    }
}

/// Absolute trajectory error after SE(2) alignment.
pub fn ate(est: &Trajectory, gt: &Trajectory) -> Result<ErrorStats, EvalError> {
    let pairs = associate(est, gt);
    if pairs.len() < 2 {
        return Err(EvalError::TooFewAssociations(pairs.len()));
    }
    let from: Vec<Point2> = pairs.iter().map(|(e, _)| e.translation()).collect();
    let to: Vec<Point2> = pairs.iter().map(|(_, g)| g.translation()).collect();
    let t = align_se2(&from, &to);
    let errors = from
        .iter()
        .zip(&to)
        .map(|(f, g)| t.transform_point(f).distance(g))
        .collect();
    Ok(ErrorStats::from_errors(errors))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RpeDelta {
    Frames(usize),
    Seconds(f64),
}

impl Default for RpeDelta {
    fn default() -> Self {
        RpeDelta::Frames(1)
    }
}

/// Relative pose error over associated samples.
pub fn rpe(est: &Trajectory, gt: &Trajectory, delta: RpeDelta) -> Result<ErrorStats, EvalError> {
    let stamped: Vec<(f64, Pose2, Pose2)> = est
        .samples
        .iter()
        .filter_map(|(t, p)| gt.nearest(*t, ASSOCIATION_WINDOW).map(|k| (*t, *p, gt.samples[k].1)))
        .collect();
    if stamped.len() < 2 {
        return Err(EvalError::TooFewAssociations(stamped.len()));
    }
    let mut errors = Vec::new();
    for k in 0..stamped.len() {
        let j = match delta {
            RpeDelta::Frames(d) => k + d.max(1),
            RpeDelta::Seconds(s) => k + stamped[k..].partition_point(|(t, _, _)| *t - stamped[k].0 < s - 1e-9),
        };
        let Some(&(_, ej, gj)) = stamped.get(j) else { break };
        let (_, ek, gk) = stamped[k];
        let rel_gt = gk.between(&gj);
        let rel_est = ek.between(&ej);
        errors.push(rel_gt.between(&rel_est).translation_norm());
    }
    if errors.is_empty() {
        return Err(EvalError::InsufficientPairs);
    }
    Ok(ErrorStats::from_errors(errors))
}
