//! Quantile coefficients used by the deterministic surrogates.

use statrs::function::erf::erfc;
use statrs::function::erf::erfc_inv;
use statrs::function::gamma::{gamma_ur, ln_gamma};

use super::{ConvexError, Result};

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

fn normal_upper_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// `m_𝒩(ε)`: the `(1 − ε)` quantile of the standard normal law.
pub fn gaussian_quantile_coeff(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 0.5) {
        return Err(ConvexError::RiskOutOfRange { eps, lo: 0.0, hi: 0.5 });
    }
    if eps == 0.5 {
        return Ok(0.0);
    }
    let mut x = std::f64::consts::SQRT_2 * erfc_inv(2.0 * eps);
    // Two Newton polishes on the tail probability.
    for _ in 0..2 {
        let pdf = (-0.5 * x * x).exp() / SQRT_2PI;
        x += (normal_upper_tail(x) - eps) / pdf;
    }
    Ok(x)
}

/// `m_χ²(ε, n)`: the square root of the `(1 − ε)` quantile of `χ²(n)`.
pub fn chi2_quantile_coeff(eps: f64, n: usize) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(ConvexError::RiskOutOfRange { eps, lo: 0.0, hi: 1.0 });
    }
    if n == 0 {
        return Err(ConvexError::InvalidParameter("chi-squared degrees of freedom must be positive".into()));
    }
    let a = 0.5 * n as f64;
    let target = eps.ln();
    let ln_tail = |x: f64| gamma_ur(a, 0.5 * x).ln();
    let ln_pdf = |x: f64| (a - 1.0) * (0.5 * x).ln() - 0.5 * x - ln_gamma(a) - std::f64::consts::LN_2;

    // Wilson–Hilferty start.
    let nf = n as f64;
    let z = std::f64::consts::SQRT_2 * erfc_inv(2.0 * eps);
    let h = 2.0 / (9.0 * nf);
    let mut x = (nf * (1.0 - h + z * h.sqrt()).powi(3)).max(1e-8);

    // Bracket: ln Q is decreasing in x.
    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    for _ in 0..200 {
        let f = ln_tail(x) - target;
        if f > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if f.abs() < 1e-15 {
            break;
        }
        // d/dx ln Q = −pdf / Q.
        let slope = -(ln_pdf(x) - ln_tail(x)).exp();
        let mut next = x - f / slope;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x.max(1.0) };
        }
        if (next - x).abs() <= 1e-15 * x.max(1.0) {
            x = next;
            break;
        }
        x = next;
    }
    Ok(x.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn normal_cdf_bisect(eps: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 40.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if normal_upper_tail(mid) > eps {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    // Regularized lower incomplete gamma by its power series; independent of
    // the library routine used in the implementation.
    fn lower_gamma_series(a: f64, x: f64) -> f64 {
        let mut term = 1.0 / a;
        let mut sum = term;
        for k in 1..2000 {
            term *= x / (a + k as f64);
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
        }
        (a * x.ln() - x - ln_gamma(a)).exp() * sum
    }

    fn chi2_bisect(eps: f64, n: usize) -> f64 {
        let a = 0.5 * n as f64;
        let (mut lo, mut hi) = (0.0, 400.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if 1.0 - lower_gamma_series(a, 0.5 * mid) > eps {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (0.5 * (lo + hi)).sqrt()
    }

    #[test]
    fn gaussian_reference_values() {
        assert_eq!(gaussian_quantile_coeff(0.5).unwrap(), 0.0);
        let m = gaussian_quantile_coeff(1e-3).unwrap();
        assert!((m - 3.09023).abs() < 1e-4);
        assert!((m - normal_cdf_bisect(1e-3)).abs() < 1e-12);
        assert!(gaussian_quantile_coeff(1e-4).unwrap() > m);
        assert!(gaussian_quantile_coeff(0.5 + 1e-9).is_err());
        assert!(gaussian_quantile_coeff(0.0).is_err());
    }

    #[test]
    fn chi2_reference_values() {
        let m = chi2_quantile_coeff(0.01, 3).unwrap();
        assert!((m - 3.36821).abs() < 1e-4);
        assert!((m - chi2_bisect(0.01, 3)).abs() < 1e-9);
        let m = chi2_quantile_coeff(1e-3, 3).unwrap();
        assert!((m - 4.03313).abs() < 1e-4);
        for &eps in &[0.3, 0.05, 1e-3, 1e-6, 1e-10] {
            let m = chi2_quantile_coeff(eps, 2).unwrap();
            assert!((m - (-2.0 * f64::ln(eps)).sqrt()).abs() < 1e-10, "eps {eps}");
        }
        assert!(chi2_quantile_coeff(0.01, 0).is_err());
        assert!(chi2_quantile_coeff(1.0, 2).is_err());
    }

    #[test]
    fn one_dof_is_two_sided_normal() {
        for &eps in &[0.2, 1e-2, 1e-3, 1e-5] {
            let a = chi2_quantile_coeff(eps, 1).unwrap();
            let b = gaussian_quantile_coeff(eps / 2.0).unwrap();
            assert!((a - b).abs() < 1e-9, "eps {eps}: {a} vs {b}");
        }
    }

    #[test]
    fn joint_coefficient_is_tighter_than_per_axis_bound() {
        // sqrt(n) · m_𝒩(ε/(2n)) bounds every axis by Boole's inequality.
        for n in 3..7 {
            let eps = 1e-3;
            let joint = chi2_quantile_coeff(eps, n).unwrap();
            let loose = (n as f64).sqrt() * gaussian_quantile_coeff(eps / (2.0 * n as f64)).unwrap();
            assert!(joint < loose);
        }
    }

    proptest! {
        #[test]
        fn chi2_matches_series_oracle(eps in 1e-8f64..0.9, n in 1usize..12) {
            let m = chi2_quantile_coeff(eps, n).unwrap();
            prop_assert!((m - chi2_bisect(eps, n)).abs() < 1e-8 * m.max(1.0));
        }

        #[test]
        fn quantiles_are_monotone(e1 in 1e-8f64..0.49, e2 in 1e-8f64..0.49, n in 1usize..8) {
            prop_assume!((e1 - e2).abs() > 1e-10);
            let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
            prop_assert!(gaussian_quantile_coeff(lo).unwrap() > gaussian_quantile_coeff(hi).unwrap());
            prop_assert!(chi2_quantile_coeff(lo, n).unwrap() > chi2_quantile_coeff(hi, n).unwrap());
        }
    }
}
