//! Closed-form Gaussian expectation of the balanced ReLU, `phi(x) = sqrt(2) max(0, x)`.
//!
//! For `(u, v)` jointly Gaussian with variances `a`, `b` and covariance `c`,
//!
//! ```text
//! E[phi(u) phi(v)] = sqrt(ab - c^2) / pi + (1 - theta / pi) c,   theta = arccos(c / sqrt(ab))
//! ```
//!
//! which maps `(a, a, a)` to `a`, so diagonal variances pass through unchanged.

use std::f64::consts::{FRAC_1_PI, SQRT_2};

/// Which quantity is fed to the arccosine.
///
/// Only [`ArccosArgument::Correlation`] is the Gaussian expectation. The
/// squared-ratio form `c^2 / (ab)` is kept for the Monte-Carlo comparison that
/// rules it out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ArccosArgument {
    #[default]
    Correlation,
    SquaredRatio,
}

/// The balanced ReLU itself.
#[inline]
pub fn balanced_relu(x: f64) -> f64 {
    SQRT_2 * x.max(0.0)
}

/// `E[phi(u) phi(v)]` for `Var u = a`, `Var v = b`, `Cov(u, v) = c`.
#[inline]
pub fn relu_expectation(a: f64, b: f64, c: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        return 0.0;
    }
    let ab = a * b;
    let rho = (c / ab.sqrt()).clamp(-1.0, 1.0);
    let theta = rho.acos();
    FRAC_1_PI * (ab - c * c).max(0.0).sqrt() + (1.0 - theta * FRAC_1_PI) * c
}

/// Same as [`relu_expectation`] with a selectable arccosine argument.
pub fn relu_expectation_with(a: f64, b: f64, c: f64, arg: ArccosArgument) -> f64 {
    match arg {
        ArccosArgument::Correlation => relu_expectation(a, b, c),
        ArccosArgument::SquaredRatio => {
            if a <= 0.0 || b <= 0.0 {
                return 0.0;
            }
            let ab = a * b;
            let theta = (c * c / ab).clamp(-1.0, 1.0).acos();
            FRAC_1_PI * (ab - c * c).max(0.0).sqrt() + (1.0 - theta * FRAC_1_PI) * c
        }
    }
}
