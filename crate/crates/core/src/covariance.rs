//! Closed-form covariance of a point-to-line match.
//!
//! With `J(x, z)` the point-to-line cost, `x` the pose and `z` the stacked
//! ranges involved in every correspondence, the first-order estimate is
//!
//! ```text
//! cov(x) ≈ (∂²J/∂x²)⁻¹ (∂²J/∂x∂z) cov(z) (∂²J/∂x∂z)ᵀ (∂²J/∂x²)⁻¹
//! ```
//!
//! with `cov(z) = σ² I`. The derivative of the segment normal with respect to
//! a reference range is taken numerically with a relative step of 1e-3.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{rotation, Point2, Pose2};
use crate::matching::correspondence::{segment_normal, Correspondence};
use crate::matching::scan::ScanPoint;

/// Relative range perturbation used for the normal derivative.
pub const NORMAL_DERIVATIVE_EPS: f64 = 1e-3;

/// Largest accepted condition number of `∂²J/∂x²`.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovarianceError {
    #[error("hessian is singular and no prior covariance is configured")]
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceConfig {
    /// Range standard deviation of the sensor, meters.
    pub sigma_range: f64,
    /// Covariance substituted when the Hessian is too ill-conditioned.
    pub prior: Option<Matrix3<f64>>,
}

impl Default for CovarianceConfig {
    fn default() -> Self {
        Self {
            sigma_range: 0.03,
            prior: Some(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.25))),
        }
    }
}

/// Ranges `(ρ_i, ρ_j1, ρ_j2)` for every correspondence slot, in slot order.
///
/// Slots without a correspondence carry only `ρ_i`; their reference entries
/// are zero and never read.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVector {
    pub entries: Vec<[f64; 3]>,
}

impl MeasurementVector {
    pub fn new(slots: &[Option<Correspondence>], current: &[ScanPoint], reference: &[ScanPoint]) -> Self {
        let entries = slots
            .iter()
            .enumerate()
            .map(|(k, c)| match c {
                Some(c) => [current[c.i].range, reference[c.j1].range, reference[c.j2].range],
                None => [current[k].range, 0.0, 0.0],
            })
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        3 * self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceResult {
    pub cov: Matrix3<f64>,
    pub hessian_xx: Matrix3<f64>,
    pub condition_ok: bool,
}

/// Spreads accepted correspondences into one slot per current point.
pub fn correspondence_slots(num_current: usize, corrs: &[Correspondence]) -> Vec<Option<Correspondence>> {
    let mut slots = vec![None; num_current];
    for c in corrs {
        slots[c.i] = Some(*c);
    }
    slots
}

fn outer(n: &Point2) -> Matrix2<f64> {
    let v = n.to_vector();
    v * v.transpose()
}

/// `∂²J/∂x²` at pose `x`, summed over correspondences.
pub fn hessian_xx(corrs: &[Correspondence], current: &[ScanPoint], reference: &[ScanPoint], x: &Pose2) -> Matrix3<f64> {
    let r = rotation(x.theta);
    let r90 = rotation(x.theta + FRAC_PI_2);
    let r180 = rotation(x.theta + PI);
    let t = Vector2::new(x.x, x.y);
    let mut h = Matrix3::zeros();
    for c in corrs {
        let p = current[c.i].point.to_vector();
        let pj1 = reference[c.j1].point.to_vector();
        let cm = outer(&c.n);
        let v1 = r90 * p;
        let v2 = r * p + t - pj1;
        let v5 = r180 * p;
        let ctt = 2.0 * cm;
        let ctth = 2.0 * cm * v1;
        let cthth = 2.0 * v2.dot(&(cm * v5)) + 2.0 * v1.dot(&(cm * v1));
        for (rr, cc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            h[(rr, cc)] += ctt[(rr, cc)];
        }
        h[(0, 2)] += ctth.x;
        h[(1, 2)] += ctth.y;
        h[(2, 0)] += ctth.x;
        h[(2, 1)] += ctth.y;
        h[(2, 2)] += cthth;
    }
    h
}

/// `∂C/∂ρ` for the reference point `which` (0 → j1, 1 → j2) of `c`.
///
/// Central difference with step `ε·|ρ|`. A one-sided difference at this step
/// has a relative error of roughly `ε / Δϑ` (the angular ray spacing), which
/// is far too coarse at LiDAR resolutions.
fn normal_outer_derivative(c: &Correspondence, reference: &[ScanPoint], which: usize) -> Matrix2<f64> {
    let p1 = reference[c.j1];
    let p2 = reference[c.j2];
    let moved = if which == 0 { p1 } else { p2 };
    let step = NORMAL_DERIVATIVE_EPS * moved.range.abs();
    if step == 0.0 {
        return Matrix2::zeros();
    }
    let at = |range: f64| {
        let shifted = moved.direction.scale(range);
        let n = if which == 0 {
            segment_normal(&shifted, &p2.point)
        } else {
            segment_normal(&p1.point, &shifted)
        };
        n.map(|n| outer(&n))
    };
    match (at(moved.range + step), at(moved.range - step)) {
        (Some(hi), Some(lo)) => (hi - lo) / (2.0 * step),
        _ => Matrix2::zeros(),
    }
}

/// `∂²J/∂x∂z`, one 3-column block per slot.
pub fn hessian_xz(
    slots: &[Option<Correspondence>],
    current: &[ScanPoint],
    reference: &[ScanPoint],
    x: &Pose2,
    z: &MeasurementVector,
) -> DMatrix<f64> {
    debug_assert_eq!(z.entries.len(), slots.len());
    let r = rotation(x.theta);
    let r90 = rotation(x.theta + FRAC_PI_2);
    let t = Vector2::new(x.x, x.y);
    let mut out = DMatrix::zeros(3, 3 * slots.len());
    for (k, slot) in slots.iter().enumerate() {
        let Some(c) = slot else { continue };
        let cur = current[c.i];
        let p = cur.point.to_vector();
        let dir = cur.direction.to_vector();
        let pj1 = reference[c.j1].point.to_vector();
        let dir_j1 = reference[c.j1].direction.to_vector();
        let cm = outer(&c.n);
        let dc1 = normal_outer_derivative(c, reference, 0);
        let dc2 = normal_outer_derivative(c, reference, 1);

        let v1 = r90 * p;
        let v2 = r * p + t - pj1;
        let v3 = r * dir;
        let v4 = r90 * dir;

        let col_i_t = 2.0 * cm * v3;
        let col_i_th = 2.0 * v2.dot(&(cm * v4)) + 2.0 * v3.dot(&(cm * v1));

        let col_j1_t = -2.0 * cm * dir_j1 + 2.0 * dc1 * v2;
        let col_j1_th = 2.0 * v2.dot(&(dc1 * v1)) - 2.0 * v1.dot(&(cm * dir_j1));

        let col_j2_t = 2.0 * dc2 * v2;
        let col_j2_th = 2.0 * v2.dot(&(dc2 * v1));

        let base = 3 * k;
        for (off, (ct, cth)) in [(col_i_t, col_i_th), (col_j1_t, col_j1_th), (col_j2_t, col_j2_th)]
            .into_iter()
            .enumerate()
        {
            out[(0, base + off)] = ct.x;
            out[(1, base + off)] = ct.y;
            out[(2, base + off)] = cth;
        }
    }
    out
}

/// Propagates range noise through the two Hessians.
pub fn match_covariance(
    hxx: &Matrix3<f64>,
    hxz: &DMatrix<f64>,
    cfg: &CovarianceConfig,
) -> Result<CovarianceResult, CovarianceError> {
    let sym = 0.5 * (hxx + hxx.transpose());
    let fallback = |hessian_xx: Matrix3<f64>| match cfg.prior {
        Some(prior) => Ok(CovarianceResult {
            cov: prior,
            hessian_xx,
            condition_ok: false,
        }),
        None => Err(CovarianceError::Degenerate),
    };
    if !sym.iter().all(|v| v.is_finite()) {
        return fallback(sym);
    }

    let mut h = sym;
    if condition_number(&h) > MAX_CONDITION {
        let mu = 1e-9 * h.trace() / 3.0;
        if mu > 0.0 {
            h += Matrix3::identity() * mu;
        }
        if condition_number(&h) > MAX_CONDITION {
            return fallback(sym);
        }
    }
    let Some(hinv) = h.try_inverse() else {
        return fallback(sym);
    };
    let sigma2 = cfg.sigma_range * cfg.sigma_range;
    let middle: Matrix3<f64> = {
        let m = hxz * hxz.transpose();
        Matrix3::from_fn(|r, c| m[(r, c)]) * sigma2
    };
    let cov = hinv * middle * hinv.transpose();
    let cov = 0.5 * (cov + cov.transpose());
    Ok(CovarianceResult {
        cov,
        hessian_xx: sym,
        condition_ok: true,
    })
}

fn condition_number(h: &Matrix3<f64>) -> f64 {
    let eig = SymmetricEigen::new(*h).eigenvalues;
    let hi = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let lo = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if lo == 0.0 || eig.iter().any(|&v| v <= 0.0) {
        return f64::INFINITY;
    }
    hi / lo
}
