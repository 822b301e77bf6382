//! Barron's general robust kernel and its IRLS weight.
//!
//! ```text
//! ρ(r; α, c) = |α-2|/α · (((r/c)²/|α-2| + 1)^(α/2) - 1)
//! w(r)       = ρ'(r) / r
//! ```
//!
//! `α = 2, 0, -∞` are removable singularities and are evaluated as their
//! limits (L2, Cauchy, Welsch). `α = 1` is the pseudo-Huber / smoothed L1
//! kernel and `α = -2` Geman-McClure.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("kernel scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("kernel shape must be at most 2, got {0}")]
    ShapeOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarronKernel {
    alpha: f64,
    c: f64,
}

impl Default for BarronKernel {
    fn default() -> Self {
        Self::cauchy(1.0)
    }
}

impl BarronKernel {
    /// `alpha` may be `f64::NEG_INFINITY` (Welsch).
    pub fn new(alpha: f64, c: f64) -> Result<Self, KernelError> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(KernelError::NonPositiveScale(c));
        }
        if alpha.is_nan() || alpha > 2.0 {
            return Err(KernelError::ShapeOutOfRange(alpha));
        }
        Ok(Self { alpha, c })
    }

    pub fn l2(c: f64) -> Self {
        Self { alpha: 2.0, c }
    }

    pub fn cauchy(c: f64) -> Self {
        Self { alpha: 0.0, c }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.c
    }

    pub fn rho(&self, r: f64) -> f64 {
        let x2 = (r / self.c).powi(2);
        let a = self.alpha;
        if a == 2.0 {
            0.5 * x2
        } else if a == 0.0 {
            (0.5 * x2).ln_1p()
        } else if a == f64::NEG_INFINITY {
            -(-0.5 * x2).exp_m1()
        } else {
            let b = (a - 2.0).abs();
            // expm1/ln1p keep the expression accurate as α approaches 0.
            b / a * (0.5 * a * (x2 / b).ln_1p()).exp_m1()
        }
    }

    /// `dρ/dr`.
    pub fn rho_prime(&self, r: f64) -> f64 {
        r * self.weight_unclamped(r)
    }

    fn weight_unclamped(&self, r: f64) -> f64 {
        let x2 = (r / self.c).powi(2);
        let inv_c2 = 1.0 / (self.c * self.c);
        let a = self.alpha;
        if a == 2.0 {
            inv_c2
        } else if a == 0.0 {
            inv_c2 / (0.5 * x2 + 1.0)
        } else if a == f64::NEG_INFINITY {
            inv_c2 * (-0.5 * x2).exp()
        } else {
            let b = (a - 2.0).abs();
            inv_c2 * (x2 / b + 1.0).powf(0.5 * a - 1.0)
        }
    }

    /// IRLS weight `ρ'(r)/r`, with the `r → 0` limit `1/c²`.
    pub fn weight(&self, r: f64) -> f64 {
        if r < 1e-12 {
            return 1.0 / (self.c * self.c);
        }
        self.weight_unclamped(r)
    }
}
