//! Closed-form point-to-line step.
//!
//! For fixed correspondences the point-to-line cost is a quadratic form in
//! `x = [t_x, t_y, cos θ, sin θ]` subject to `x_3² + x_4² = 1`:
//!
//! ```text
//! cost(x) = xᵀ M x + gᵀ x + k
//! ```
//!
//! The Lagrange condition `(2M + 2λW) x = -g` together with the constraint
//! yields a quartic in `λ`. Writing `2M = [A B; Bᵀ D]`, `S = D - Bᵀ A⁻¹ B` and
//! `Sᴬ` for the adjugate of `S`, its coefficients are
//!
//! ```text
//! a = 16
//! b = 16 tr(S)
//! c = 8|S| + 4 tr(S)² - 4 gᵀ Q₁ g
//! d = 4|S| tr(S)     - 4 gᵀ Q₂ g
//! e = |S|²           -   gᵀ Q₃ g
//! ```
//!
//! with the block quadratic forms `Q₁..Q₃` built from `A⁻¹B` and `I`, `Sᴬ`,
//! `SᴬᵀSᴬ` respectively.

use nalgebra::{Matrix2, Matrix4, SymmetricEigen, Vector2, Vector4};

use crate::geometry::{Point2, Pose2};

use super::correspondence::Correspondence;
use super::quartic::solve_quartic;
use super::MatchError;

/// Normal equations of one point-to-line step.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalSystem {
    pub m: Matrix4<f64>,
    pub g: Vector4<f64>,
    pub w: Matrix4<f64>,
    /// Top-left block of `2M`.
    pub a: Matrix2<f64>,
    /// Top-right block of `2M`.
    pub b: Matrix2<f64>,
    /// Schur complement of `a` in `2M`.
    pub s: Matrix2<f64>,
    /// Constant term of the cost, `Σ p_j1ᵀ C p_j1`.
    pub constant: f64,
}

impl NormalSystem {
    /// `xᵀ M x + gᵀ x + k`.
    pub fn cost(&self, x: &Vector4<f64>) -> f64 {
        (x.transpose() * self.m * x)[0] + self.g.dot(x) + self.constant
    }

    /// `2M + 2λW`.
    pub fn lagrangian_matrix(&self, lambda: f64) -> Matrix4<f64> {
        2.0 * self.m + 2.0 * lambda * self.w
    }

    /// `x(λ) = -(2M + 2λW)⁻¹ g`, if the matrix is invertible.
    pub fn solution(&self, lambda: f64) -> Option<Vector4<f64>> {
        self.lagrangian_matrix(lambda).lu().solve(&(-self.g))
    }

    /// Left-hand side of the secular equation `gᵀ N⁻¹ W N⁻ᵀ g`, `N = 2M + 2λW`.
    pub fn constraint_value(&self, lambda: f64) -> Option<f64> {
        let n = self.lagrangian_matrix(lambda);
        let ninv = n.try_inverse()?;
        Some((self.g.transpose() * ninv * self.w * ninv.transpose() * self.g)[0])
    }
}

/// `[t_x, t_y, cos θ, sin θ]` parametrization of a pose.
pub fn pose_to_params(q: &Pose2) -> Vector4<f64> {
    Vector4::new(q.x, q.y, q.theta.cos(), q.theta.sin())
}

/// Point-to-line cost of placing the current points at `q`.
pub fn objective(
    corrs: &[Correspondence],
    current: &[Point2],
    reference: &[Point2],
    q: &Pose2,
) -> f64 {
    corrs
        .iter()
        .map(|c| {
            let pw = q.transform_point(&current[c.i]);
            let r = c.n.dot(&pw.sub(&reference[c.j1]));
            r * r
        })
        .sum()
}

/// Assembles `M`, `g` and the block decomposition for fixed correspondences.
pub fn build_normal_system(
    corrs: &[Correspondence],
    current: &[Point2],
    reference: &[Point2],
) -> Result<NormalSystem, MatchError> {
    if corrs.len() < 3 {
        return Err(MatchError::InsufficientCorrespondences(corrs.len()));
    }
    let mut m = Matrix4::zeros();
    let mut g = Vector4::zeros();
    let mut constant = 0.0;
    for c in corrs {
        let p = current[c.i];
        let pi = reference[c.j1].to_vector();
        let n = c.n.to_vector();
        let cm = n * n.transpose();
        #[rustfmt::skip]
        let mi = nalgebra::Matrix2x4::new(
            1.0, 0.0, p.x, -p.y,
            0.0, 1.0, p.y, p.x,
        );
        m += mi.transpose() * cm * mi;
        g += -2.0 * mi.transpose() * cm * pi;
        constant += (pi.transpose() * cm * pi)[0];
    }
    let two_m = 2.0 * m;
    let a: Matrix2<f64> = two_m.fixed_view::<2, 2>(0, 0).into();
    let b: Matrix2<f64> = two_m.fixed_view::<2, 2>(0, 2).into();
    let d: Matrix2<f64> = two_m.fixed_view::<2, 2>(2, 2).into();

    // A = 2 Σ n nᵀ loses rank when all normals are parallel.
    let eig = a.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0) || lo <= 1e-9 * hi {
        return Err(MatchError::DegenerateGeometry);
    }
    let a_inv = a.try_inverse().ok_or(MatchError::DegenerateGeometry)?;
    let s = d - b.transpose() * a_inv * b;
    let s = 0.5 * (s + s.transpose());

    let mut w = Matrix4::zeros();
    w[(2, 2)] = 1.0;
    w[(3, 3)] = 1.0;
    Ok(NormalSystem {
        m,
        g,
        w,
        a,
        b,
        s,
        constant,
    })
}

fn adjugate(s: &Matrix2<f64>) -> Matrix2<f64> {
    Matrix2::new(s[(1, 1)], -s[(0, 1)], -s[(1, 0)], s[(0, 0)])
}

/// Coefficients `(a, b, c, d, e)` of the quartic in the Lagrange multiplier.
pub fn quartic_coefficients(sys: &NormalSystem) -> Result<[f64; 5], MatchError> {
    let a_inv = sys.a.try_inverse().ok_or(MatchError::DegenerateGeometry)?;
    let aib = a_inv * sys.b;
    let s = sys.s;
    let sa = adjugate(&s);
    let det_s = s.determinant();
    let tr_s = s.trace();
    let sta = sa.transpose() * sa;

    // gᵀQg for the block forms [P K Pᵀ, -P K; ·, K] with P = A⁻¹B collapses
    // to hᵀKh with h = g₂ - Pᵀg₁. Forming h first avoids cancelling large
    // g₁ and g₂ terms against each other.
    let h = Vector2::new(sys.g[2], sys.g[3]) - aib.transpose() * Vector2::new(sys.g[0], sys.g[1]);
    let m1 = h.dot(&h);
    let m2 = h.dot(&(sa * h));
    let m3 = h.dot(&(sta * h));

    Ok([
        16.0,
        16.0 * tr_s,
        8.0 * det_s + 4.0 * tr_s * tr_s - 4.0 * m1,
        4.0 * det_s * tr_s - 4.0 * m2,
        det_s * det_s - m3,
    ])
}

/// The rotation-only problem left after eliminating the translation.
struct Reduced {
    a_inv: Matrix2<f64>,
    g1: Vector2<f64>,
    sigma: Vector2<f64>,
    v: Matrix2<f64>,
    /// `h` in the eigenbasis of `S`.
    ht: Vector2<f64>,
}

impl Reduced {
    fn new(sys: &NormalSystem) -> Result<Self, MatchError> {
        let a_inv = sys.a.try_inverse().ok_or(MatchError::DegenerateGeometry)?;
        let g1 = Vector2::new(sys.g[0], sys.g[1]);
        let g2 = Vector2::new(sys.g[2], sys.g[3]);
        let h = g2 - sys.b.transpose() * a_inv * g1;
        let eig = SymmetricEigen::new(sys.s);
        let ht = eig.eigenvectors.transpose() * h;
        Ok(Self {
            a_inv,
            g1,
            sigma: eig.eigenvalues,
            v: eig.eigenvectors,
            ht,
        })
    }

    /// `1 - 1/|y(λ)|` and its derivative, where `|y(λ)|² = Σ h̃ₖ²/(σₖ+2λ)²`.
    fn secular(&self, lambda: f64) -> Option<(f64, f64)> {
        let mut n2 = 0.0;
        let mut dn2 = 0.0;
        for k in 0..2 {
            let den = self.sigma[k] + 2.0 * lambda;
            if den == 0.0 {
                return None;
            }
            let h2 = self.ht[k] * self.ht[k];
            n2 += h2 / (den * den);
            dn2 -= 4.0 * h2 / (den * den * den);
        }
        if !(n2 > 0.0) || !n2.is_finite() {
            return None;
        }
        let n = n2.sqrt();
        Some((1.0 - 1.0 / n, dn2 / (2.0 * n2 * n)))
    }
}

/// Horner evaluation with error-free transformations; as accurate as plain
/// Horner in twice the working precision.
fn compensated_horner(p: &[f64], x: f64) -> f64 {
    let (mut s, mut err) = (p[0], 0.0);
    for &c in &p[1..] {
        let m = s * x;
        let pe = s.mul_add(x, -m);
        let t = m + c;
        let bb = t - m;
        let se = (m - (t - bb)) + (c - bb);
        s = t;
        err = err * x + (pe + se);
    }
    s + err
}

/// Real roots of the multiplier quartic, each refined by Newton steps on the
/// secular equation. Near a pole of the secular function the quartic root is
/// accurate as a polynomial root but not as a solution of the unit constraint;
/// the refinement fixes that. Final Newton steps on the polynomial itself are
/// kept while the constraint still holds to 1e-8.
pub fn multiplier_roots(sys: &NormalSystem) -> Result<Vec<f64>, MatchError> {
    let [a, b, c, d, e] = quartic_coefficients(sys)?;
    let r = Reduced::new(sys)?;
    let mut roots = solve_quartic(a, b, c, d, e);
    for lambda in roots.iter_mut() {
        let Some((mut f, _)) = r.secular(*lambda) else { continue };
        for _ in 0..8 {
            let Some((_, df)) = r.secular(*lambda) else { break };
            if df == 0.0 || f == 0.0 {
                break;
            }
            let next = *lambda - f / df;
            match r.secular(next) {
                Some((fn_, _)) if fn_.abs() < f.abs() => {
                    *lambda = next;
                    f = fn_;
                }
                _ => break,
            }
        }
        // The coefficients carry their own rounding, so the secular root can
        // sit thousands of ulps off the computed polynomial's root. Step onto
        // the polynomial when that keeps the constraint satisfied.
        for _ in 0..3 {
            let val = compensated_horner(&[a, b, c, d, e], *lambda);
            let slope = ((4.0 * a * *lambda + 3.0 * b) * *lambda + 2.0 * c) * *lambda + d;
            if slope == 0.0 || val == 0.0 {
                break;
            }
            let next = *lambda - val / slope;
            if next == *lambda || !matches!(r.secular(next), Some((g, _)) if g.abs() <= 1e-8_f64.max(f.abs())) {
                break;
            }
            *lambda = next;
        }
    }
    Ok(roots)
}

/// Candidate parameter vectors for every real root of the quartic.
///
/// Eliminating the translation block reduces the problem to minimizing
/// `½ yᵀ S y + hᵀ y` over unit vectors `y = [cos θ, sin θ]`, with
/// `h = g₂ - Bᵀ A⁻¹ g₁`. In the eigenbasis of `S` a multiplier `λ` gives
/// `y_k = -h_k / (σ_k + 2λ)`. The component whose denominator is closest to
/// zero is taken from the unit-norm constraint instead, which keeps the
/// candidate well defined when `2M + 2λW` is (nearly) singular. The
/// multiplier `-σ_min / 2` is always tried as well; it carries the global
/// minimum when `h` has no component along the weakest eigenvector.
pub fn step_candidates(sys: &NormalSystem) -> Result<Vec<(f64, Vector4<f64>)>, MatchError> {
    let r = Reduced::new(sys)?;
    let (a_inv, g1, sigma, v, ht) = (r.a_inv, r.g1, r.sigma, r.v, r.ht);
    let weakest = if sigma[0] <= sigma[1] { 0 } else { 1 };

    let mut lambdas = multiplier_roots(sys)?;
    lambdas.push(-0.5 * sigma[weakest]);

    let mut out = Vec::new();
    for lambda in lambdas {
        let den = [sigma[0] + 2.0 * lambda, sigma[1] + 2.0 * lambda];
        let k = if den[0].abs() <= den[1].abs() { 0 } else { 1 };
        let o = 1 - k;
        if den[o] == 0.0 {
            continue;
        }
        let mut y = [0.0; 2];
        y[o] = -ht[o] / den[o];
        let rem = 1.0 - y[o] * y[o];
        if rem < -1e-6 {
            continue;
        }
        let mag = rem.max(0.0).sqrt();
        let formula = if den[k] != 0.0 { -ht[k] / den[k] } else { f64::NAN };
        let signs: &[f64] = if formula.is_finite() && formula != 0.0 && (formula.abs() - mag).abs() <= 1e-6 {
            if formula > 0.0 { &[1.0] } else { &[-1.0] }
        } else {
            &[1.0, -1.0]
        };
        for &sgn in signs {
            y[k] = sgn * mag;
            let x2 = v * Vector2::new(y[0], y[1]);
            let x1 = -a_inv * (sys.b * x2 + g1);
            out.push((lambda, Vector4::new(x1.x, x1.y, x2.x, x2.y)));
        }
    }
    Ok(out)
}

/// Global minimizer of the point-to-line cost for fixed correspondences.
///
/// Every real root is tried; the admissible candidate (unit-norm rotation
/// part) with the lowest cost wins.
pub fn plicp_step(sys: &NormalSystem) -> Result<Pose2, MatchError> {
    let mut best: Option<(f64, Vector4<f64>)> = None;
    for (_, x) in step_candidates(sys)? {
        let unit = x[2] * x[2] + x[3] * x[3];
        if !x.iter().all(|v| v.is_finite()) || (unit - 1.0).abs() >= 1e-6 {
            continue;
        }
        let cost = sys.cost(&x);
        if best.as_ref().map_or(true, |(c, _)| cost < *c) {
            best = Some((cost, x));
        }
    }
    let (_, x) = best.ok_or(MatchError::StepFailure)?;
    Ok(Pose2::new(x[0], x[1], x[3].atan2(x[2])))
}
