//! Gaussian CDF/PDF and the GELU nonlinearity built on them.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// CDF of N(0, σ²) evaluated at `p`.
pub fn normal_cdf<T: Scalar>(p: T, sigma: T) -> Result<T> {
    check_sigma(sigma)?;
    Ok(normal_cdf_unchecked(p, sigma))
}

/// Density of N(0, σ²) at `p`; the derivative of [`normal_cdf`].
pub fn normal_pdf<T: Scalar>(p: T, sigma: T) -> Result<T> {
    check_sigma(sigma)?;
    Ok(normal_pdf_unchecked(p, sigma))
}

pub(crate) fn check_sigma<T: Scalar>(sigma: T) -> Result<()> {
    if !(sigma > T::zero()) || !sigma.is_finite() {
        return Err(Error::Parameter(format!(
            "normal CDF needs sigma > 0, got {sigma}"
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn normal_cdf_unchecked<T: Scalar>(p: T, sigma: T) -> T {
    let half = T::lit(0.5);
    half * (T::one() + (p / (sigma * T::lit(std::f64::consts::SQRT_2))).error_fn())
}

#[inline]
pub(crate) fn normal_pdf_unchecked<T: Scalar>(p: T, sigma: T) -> T {
    let z = p / sigma;
    (-(z * z) * T::lit(0.5)).exp() / (sigma * T::lit((2.0 * std::f64::consts::PI).sqrt()))
}

/// Exact GELU: `x · Φ(x)` with Φ the standard normal CDF.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    x * normal_cdf_unchecked(x, T::one())
}

#[inline]
pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    normal_cdf_unchecked(x, T::one()) + x * normal_pdf_unchecked(x, T::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Maclaurin series of erf, summed to 60 terms.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..60 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn cdf_at_zero_is_half() {
        for sigma in [0.01, 0.5, 1.0, 7.0] {
            assert_eq!(normal_cdf(0.0, sigma).unwrap(), 0.5);
        }
    }

    #[test]
    fn cdf_symmetry() {
        for p in [0.1f64, 0.9, 2.3] {
            let s = normal_cdf(p, 0.5).unwrap() + normal_cdf(-p, 0.5).unwrap();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cdf_matches_series_oracle() {
        let got = normal_cdf(0.9, 0.5).unwrap();
        let want = 0.5 * (1.0 + erf_series(0.9 / (0.5 * 2f64.sqrt())));
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        for i in -30..=30 {
            let x: f64 = i as f64 * 0.1;
            assert!((Scalar::error_fn(x) - erf_series(x)).abs() < 1e-10);
        }
    }

    #[test]
    fn cdf_rejects_bad_sigma() {
        assert!(matches!(normal_cdf(0.1, 0.0), Err(Error::Parameter(_))));
        assert!(normal_cdf(0.1, -1.0).is_err());
        assert!(normal_pdf(0.1, f64::NAN).is_err());
    }

    #[test]
    fn pdf_is_cdf_derivative() {
        let sigma = 0.5;
        let h = 1e-6;
        for p in [-1.0f64, -0.2, 0.0, 0.3, 0.9] {
            let fd = (normal_cdf(p + h, sigma).unwrap() - normal_cdf(p - h, sigma).unwrap()) / (2.0 * h);
            assert!((fd - normal_pdf(p, sigma).unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        let h = 1e-6;
        for x in [-3.0f64, -0.7, 0.0, 0.4, 2.2] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn f32_path() {
        let v: f32 = normal_cdf(0.9f32, 0.5).unwrap();
        assert!((v as f64 - normal_cdf(0.9f64, 0.5).unwrap()).abs() < 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn cdf_monotone(a in -3.0f64..3.0, b in -3.0f64..3.0, sigma in 0.5f64..3.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            proptest::prop_assume!(hi - lo > 1e-3);
            proptest::prop_assert!(normal_cdf(lo, sigma).unwrap() < normal_cdf(hi, sigma).unwrap());
        }
    }
}
