//! Gamma-function helpers.

use crate::error::{Error, Result};

/// Regularized lower incomplete gamma `P(a, x) = gamma(a, x) / Gamma(a)`.
pub fn reg_lower_gamma(a: f64, x: f64) -> Result<f64> {
    if !(a > 0.0) || !(x >= 0.0) {
        return Err(Error::arg(format!("P(a, x) needs a > 0 and x >= 0, got ({a}, {x})")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    Ok(statrs::function::gamma::gamma_lr(a, x))
}

/// `ln Gamma(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_case() {
        for x in [1e-6, 0.3, 1.0, 4.0, 30.0] {
            let p = reg_lower_gamma(1.0, x).unwrap();
            assert!((p - (-(-x).exp_m1())).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn domain() {
        assert!(reg_lower_gamma(0.0, 1.0).is_err());
        assert!(reg_lower_gamma(1.0, -1.0).is_err());
        assert_eq!(reg_lower_gamma(2.0, 0.0).unwrap(), 0.0);
        assert_eq!(reg_lower_gamma(2.0, f64::INFINITY).unwrap(), 1.0);
    }

    #[test]
    fn integer_shape_closed_form() {
        // P(3, x) = 1 - e^{-x}(1 + x + x^2/2)
        for x in [0.5f64, 2.0, 7.0] {
            let want = 1.0 - (-x).exp() * (1.0 + x + x * x / 2.0);
            assert!((reg_lower_gamma(3.0, x).unwrap() - want).abs() < 1e-13);
        }
    }
}
