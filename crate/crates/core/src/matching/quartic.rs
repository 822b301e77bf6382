//! Real roots of a quartic via companion-matrix eigenvalues.

use nalgebra::{Matrix4, Schur};

/// Returns the real roots of `a x^4 + b x^3 + c x^2 + d x + e`, ascending.
///
/// The polynomial is made monic and the variable rescaled so the companion
/// matrix is balanced; eigenvalues whose imaginary part is negligible are
/// polished with Newton steps on the rescaled polynomial. Complex roots are
/// dropped. `a` must be non-zero; otherwise an empty set is returned.
pub fn solve_quartic(a: f64, b: f64, c: f64, d: f64, e: f64) -> Vec<f64> {
    if a == 0.0 || !a.is_finite() {
        return Vec::new();
    }
    let coeffs = [b / a, c / a, d / a, e / a];
    if coeffs.iter().any(|v| !v.is_finite()) {
        return Vec::new();
    }
    // x = s * y with s chosen so the monic coefficients in y are O(1).
    let mut s = 0.0f64;
    for (k, v) in coeffs.iter().enumerate() {
        s = s.max(v.abs().powf(1.0 / (k + 1) as f64));
    }
    if s == 0.0 {
        return vec![0.0];
    }
    let scaled = [
        coeffs[0] / s,
        coeffs[1] / (s * s),
        coeffs[2] / (s * s * s),
        coeffs[3] / (s * s * s * s),
    ];

    #[rustfmt::skip]
    let companion = Matrix4::new(
        -scaled[0], -scaled[1], -scaled[2], -scaled[3],
        1.0, 0.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
        0.0, 0.0, 1.0, 0.0,
    );
    // The unshifted-QR Schur iteration can stall on symmetric root patterns
    // (e.g. x⁴ + 1); fall back to derivative-based isolation then.
    let Some(schur) = Schur::try_new(companion, f64::EPSILON, 1000) else {
        return isolate_real_roots(&[a, b, c, d, e]);
    };
    let eig = schur.complex_eigenvalues();

    let poly = |y: f64| (((y + scaled[0]) * y + scaled[1]) * y + scaled[2]) * y + scaled[3];
    let dpoly = |y: f64| ((4.0 * y + 3.0 * scaled[0]) * y + 2.0 * scaled[1]) * y + scaled[2];
    let rel_residual = |y: f64| poly(y).abs() / y.abs().powi(4).max(1.0);

    let mut roots: Vec<f64> = Vec::with_capacity(4);
    for z in eig.iter() {
        if z.im.abs() > 1e-5 * z.norm().max(1.0) {
            continue;
        }
        let mut y = z.re;
        let mut best = (rel_residual(y), y);
        for _ in 0..16 {
            let dp = dpoly(y);
            if dp == 0.0 {
                break;
            }
            y -= poly(y) / dp;
            let r = rel_residual(y);
            if r < best.0 {
                best = (r, y);
            }
            if r == 0.0 {
                break;
            }
        }
        // Near-double roots show up as a complex pair with tiny imaginary
        // parts; keep the real part only if it really is a root.
        if best.0 < 1e-11 {
            roots.push(best.1 * s);
        }
    }
    roots.sort_by(|x, y| x.partial_cmp(y).unwrap());
    roots.dedup_by(|x, y| (*x - *y).abs() <= 1e-6 * s);
    roots
}

/// Real roots of a polynomial (highest degree first) by recursively
/// isolating them between the real roots of its derivative.
fn isolate_real_roots(coeffs: &[f64]) -> Vec<f64> {
    let deg = coeffs.len() - 1;
    let eval = |x: f64| coeffs.iter().fold(0.0, |acc, c| acc * x + c);
    if deg == 1 {
        return vec![-coeffs[1] / coeffs[0]];
    }
    let deriv: Vec<f64> = coeffs[..deg]
        .iter()
        .enumerate()
        .map(|(k, c)| c * (deg - k) as f64)
        .collect();
    let crit = isolate_real_roots(&deriv);
    // Cauchy bound on root magnitude.
    let bound = 1.0 + coeffs[1..].iter().fold(0.0f64, |m, c| m.max((c / coeffs[0]).abs()));
    let mut knots = vec![-bound];
    knots.extend(crit.iter().copied().filter(|x| x.abs() < bound));
    knots.push(bound);
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let mut roots = Vec::new();
    for w in knots.windows(2) {
        let (mut lo, mut hi) = (w[0], w[1]);
        let (flo, fhi) = (eval(lo), eval(hi));
        if flo == 0.0 {
            roots.push(lo);
            continue;
        }
        if flo.signum() == fhi.signum() {
            continue;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            if eval(mid).signum() == flo.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        roots.push(0.5 * (lo + hi));
    }
    // Even-multiplicity roots touch zero at a critical point.
    for &x in &crit {
        if eval(x).abs() <= 1e-12 * scale * x.abs().powi(deg as i32).max(1.0) {
            roots.push(x);
        }
    }
    roots.sort_by(|x, y| x.partial_cmp(y).unwrap());
    roots.dedup_by(|x, y| (*x - *y).abs() <= 1e-9 * x.abs().max(1.0));
    roots
}

/// `a x^4 + ... + e` evaluated by Horner's rule.
pub fn eval_quartic(coeffs: &[f64; 5], x: f64) -> f64 {
    let [a, b, c, d, e] = *coeffs;
    (((a * x + b) * x + c) * x + d) * x + e
}
