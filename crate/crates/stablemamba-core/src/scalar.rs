//! Element types for the numeric kernels.
//!
//! Everything generic in this crate is written against [`Scalar`], with exactly
//! two instantiations: `f32` for the forward/training path and `f64` for
//! oracles and gradient checks. `f32` delegates its transcendentals through
//! `f64` so both paths evaluate the same underlying functions.

use std::fmt::{Debug, Display};

pub trait Scalar:
    Copy
    + PartialEq
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn powi(self, n: i32) -> Self {
        f32::powi(self, n)
    }
    fn max(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn min(self, other: Self) -> Self {
        f32::min(self, other)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn min(self, other: Self) -> Self {
        f64::min(self, other)
    }
}

/// Error function, accurate to ~1e-15 over the whole line.
///
/// Uses the all-positive-terms series
/// `erf(x) = (2/sqrt(pi)) * exp(-x^2) * sum_k x^(2k+1) * 2^k / (1*3*...*(2k+1))`,
/// which is cancellation-free, and saturates to +/-1 for |x| >= 6 where
/// `1 - |erf|` is below machine epsilon. The GELU backward is checked against
/// finite differences of the *implemented* forward, so erf itself must be
/// accurate to near machine precision — a 1e-7-level approximation would show
/// up as a phantom gradient error.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let ax = x.abs();
    if ax >= 6.0 {
        return if x > 0.0 { 1.0 } else { -1.0 };
    }
    let x2 = x * x;
    let mut term = x; // x * 2^0 / 1
    let mut sum = term;
    let mut k = 1u32;
    loop {
        term *= 2.0 * x2 / (2.0 * k as f64 + 1.0);
        let new = sum + term;
        if new == sum || k > 200 {
            break;
        }
        sum = new;
        k += 1;
    }
    const TWO_OVER_SQRT_PI: f64 = 1.1283791670955126;
    TWO_OVER_SQRT_PI * (-x2).exp() * sum
}

/// Standard normal CDF, `0.5 * (1 + erf(x / sqrt(2)))`.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Standard normal PDF.
pub fn norm_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.3989422804014327;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Exact (erf-based) GELU on one element.
pub fn gelu_scalar<E: Scalar>(x: E) -> E {
    let xf = x.to_f64();
    E::from_f64(xf * norm_cdf(xf))
}

/// Derivative of exact GELU: `Phi(x) + x * phi(x)`.
pub fn gelu_deriv<E: Scalar>(x: E) -> E {
    let xf = x.to_f64();
    E::from_f64(norm_cdf(xf) + xf * norm_pdf(xf))
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid<E: Scalar>(x: E) -> E {
    let xf = x.to_f64();
    let s = if xf >= 0.0 {
        1.0 / (1.0 + (-xf).exp())
    } else {
        let e = xf.exp();
        e / (1.0 + e)
    };
    E::from_f64(s)
}

/// `x * sigmoid(x)`.
pub fn silu_scalar<E: Scalar>(x: E) -> E {
    x * sigmoid(x)
}

/// Derivative of SiLU: `s + x*s*(1-s)` with `s = sigmoid(x)`.
pub fn silu_deriv<E: Scalar>(x: E) -> E {
    let s = sigmoid(x);
    s + x * s * (E::ONE - s)
}

/// Numerically stable softplus `ln(1 + e^x)`.
pub fn softplus<E: Scalar>(x: E) -> E {
    let xf = x.to_f64();
    let v = if xf > 30.0 {
        xf
    } else if xf < -30.0 {
        xf.exp()
    } else {
        xf.exp().ln_1p()
    };
    E::from_f64(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_values() {
        // Reference values to 16 digits (Abramowitz & Stegun / mpmath).
        let cases = [
            (0.0, 0.0),
            (0.5, 0.5204998778130465),
            (1.0, 0.8427007929497149),
            (2.0, 0.9953222650189527),
            (3.0, 0.9999779095030014),
            (4.0, 0.9999999845827421),
            (-1.0, -0.8427007929497149),
        ];
        for (x, want) in cases {
            let got = erf(x);
            assert!(
                (got - want).abs() < 1e-14,
                "erf({x}) = {got}, want {want}"
            );
        }
        assert_eq!(erf(7.0), 1.0);
        assert_eq!(erf(-7.0), -1.0);
    }

    #[test]
    fn erf_is_smooth_near_saturation() {
        // The series/saturation boundary at |x|=6 must not leave a step that a
        // finite-difference probe could see.
        assert!((erf(5.999999) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gelu_matches_definition() {
        let x = 0.7f64;
        let want = x * 0.5 * (1.0 + erf(x / 2.0f64.sqrt()));
        assert!((gelu_scalar(x) - want).abs() < 1e-15);
        // gelu(0) = 0, gelu(large) ~ x, gelu(-large) ~ 0
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-12);
        assert!(gelu_scalar(-10.0f64).abs() < 1e-12);
    }

    #[test]
    fn gelu_deriv_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.3, 1.5, 4.0] {
            let num = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            let ana = gelu_deriv(x);
            assert!(
                (num - ana).abs() < 1e-8,
                "gelu'({x}): numeric {num} vs analytic {ana}"
            );
        }
    }

    #[test]
    fn softplus_stable_and_positive() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!(softplus(-40.0f64) > 0.0, "softplus must stay strictly positive");
    }

    #[test]
    fn sigmoid_extremes() {
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
        assert!(sigmoid(100.0f64) <= 1.0 && sigmoid(100.0f64) > 0.999);
        assert!(sigmoid(-100.0f64) >= 0.0 && sigmoid(-100.0f64) < 1e-40);
    }
}
