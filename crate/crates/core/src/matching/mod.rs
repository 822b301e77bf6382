//! Point-to-line ICP scan matching.
//!
//! [`match_scans`] aligns a current scan against a reference scan. Each
//! iteration transforms the current points by the running estimate, pairs
//! them with the two closest reference points and replaces the estimate by
//! the exact minimizer of the point-to-line cost for those pairs
//! ([`plicp::plicp_step`]).

pub mod correspondence;
pub mod plicp;
pub mod quartic;
pub mod scan;

use nalgebra::Matrix3;
use thiserror::Error;

use crate::covariance::{
    self, correspondence_slots, CovarianceConfig, CovarianceError, MeasurementVector,
};
use crate::geometry::{Point2, Pose2};

pub use correspondence::{find_correspondences, Correspondence, ReferenceIndex};
pub use plicp::{build_normal_system, multiplier_roots, plicp_step, quartic_coefficients, NormalSystem};
pub use quartic::solve_quartic;
pub use scan::{scan_to_points, LaserScan, ScanPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("invalid scan: {0}")]
    InvalidScan(String),
    #[error("too few valid rays: {found} < {required}")]
    TooFewRays { found: usize, required: usize },
    #[error("reference has {0} points, need at least 2")]
    ReferenceTooSmall(usize),
    #[error("only {0} correspondences")]
    InsufficientCorrespondences(usize),
    #[error("degenerate geometry: all normals parallel")]
    DegenerateGeometry,
    #[error("no admissible root of the multiplier quartic")]
    StepFailure,
    #[error(transparent)]
    Covariance(#[from] CovarianceError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherConfig {
    /// Correspondence gate, meters.
    pub max_dist: f64,
    pub min_valid_rays: usize,
    /// Fewer surviving pairs than this aborts the match.
    pub min_correspondences: usize,
    pub max_iterations: usize,
    pub eps_t: f64,
    pub eps_theta: f64,
    pub covariance: CovarianceConfig,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            max_dist: 1.0,
            min_valid_rays: 50,
            min_correspondences: 10,
            max_iterations: 50,
            eps_t: 1e-4,
            eps_theta: 1e-4,
            covariance: CovarianceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Pose of the current scan in the reference scan's frame.
    pub q: Pose2,
    pub covariance: Matrix3<f64>,
    /// False when the covariance fell back to the configured prior.
    pub covariance_ok: bool,
    pub iterations: usize,
    /// Correspondences in the final association.
    pub num_valid: usize,
    /// Point-to-line cost at `q`, m².
    pub residual_sum: f64,
    pub converged: bool,
}

impl MatchResult {
    /// Mean squared point-to-line residual in units of the range variance.
    pub fn normalized_residual(&self, sigma_range: f64) -> f64 {
        if self.num_valid == 0 {
            return f64::INFINITY;
        }
        self.residual_sum / (self.num_valid as f64 * sigma_range * sigma_range)
    }
}

/// Aligns `current` to `reference` starting from `initial_guess`.
pub fn match_scans(
    current: &LaserScan,
    reference: &LaserScan,
    initial_guess: &Pose2,
    cfg: &MatcherConfig,
) -> Result<MatchResult, MatchError> {
    let cur = scan_to_points(current);
    let refs = scan_to_points(reference);
    for n in [cur.len(), refs.len()] {
        if n < cfg.min_valid_rays {
            return Err(MatchError::TooFewRays {
                found: n,
                required: cfg.min_valid_rays,
            });
        }
    }
    match_points(&cur, &refs, initial_guess, cfg)
}

/// [`match_scans`] on pre-extracted points.
pub fn match_points(
    current: &[ScanPoint],
    reference: &[ScanPoint],
    initial_guess: &Pose2,
    cfg: &MatcherConfig,
) -> Result<MatchResult, MatchError> {
    let cur_pts: Vec<Point2> = current.iter().map(|p| p.point).collect();
    let ref_pts: Vec<Point2> = reference.iter().map(|p| p.point).collect();
    let index = ReferenceIndex::new(ref_pts.clone(), cfg.max_dist)?;

    let mut q = *initial_guess;
    let mut converged = false;
    let mut iterations = 0;
    let mut world = vec![Point2::default(); cur_pts.len()];
    while iterations < cfg.max_iterations {
        iterations += 1;
        for (w, p) in world.iter_mut().zip(&cur_pts) {
            *w = q.transform_point(p);
        }
        let corrs = find_correspondences(&world, &index, cfg.max_dist);
        if corrs.len() < cfg.min_correspondences.max(3) {
            return Err(MatchError::InsufficientCorrespondences(corrs.len()));
        }
        let sys = build_normal_system(&corrs, &cur_pts, &ref_pts)?;
        let next = plicp_step(&sys)?;
        let delta = q.between(&next);
        q = next;
        if delta.translation_norm() < cfg.eps_t && delta.theta.abs() < cfg.eps_theta {
            converged = true;
            break;
        }
    }

    for (w, p) in world.iter_mut().zip(&cur_pts) {
        *w = q.transform_point(p);
    }
    let corrs = find_correspondences(&world, &index, cfg.max_dist);
    if corrs.len() < cfg.min_correspondences.max(3) {
        return Err(MatchError::InsufficientCorrespondences(corrs.len()));
    }
    let residual_sum = plicp::objective(&corrs, &cur_pts, &ref_pts, &q);

    let hxx = covariance::hessian_xx(&corrs, current, reference, &q);
    let slots = correspondence_slots(current.len(), &corrs);
    let z = MeasurementVector::new(&slots, current, reference);
    let hxz = covariance::hessian_xz(&slots, current, reference, &q, &z);
    let cov = covariance::match_covariance(&hxx, &hxz, &cfg.covariance)?;

    Ok(MatchResult {
        q,
        covariance: cov.cov,
        covariance_ok: cov.condition_ok,
        iterations,
        num_valid: corrs.len(),
        residual_sum,
        converged,
    })
}
