//! Entire "ad hoc" hyperbolic functions and the Taylor remainders used by the
//! error term.
//!
//! ```text
//! cah(z) = sum_k z^k / (2k)!        cah(a^2) = cosh(a)
//! sah(z) = sum_k z^k / (2k+1)!      sah(a^2) = sinh(a) / a
//! tah(z) = sah(z) / cah(z)          defined for Re z > -pi^2/4
//! ```
//!
//! On the imaginary axis `z = i lambda` all three are evaluated through
//! `w = sqrt(i lambda)` with `Re w >= 0`, using `exp(-2w)` so that nothing
//! overflows for large `|lambda|`.

use num_complex::Complex64;
use std::f64::consts::{LN_2, PI};

use crate::error::{Error, Result};

pub type Complex = Complex64;

const SERIES_RADIUS: f64 = 1.0;
const SERIES_TERMS: usize = 24;

/// Lower bound of the half-plane where `cah` has no zero.
pub const TAH_DOMAIN_EDGE: f64 = -PI * PI / 4.0;

fn series(z: Complex, odd: bool) -> Complex {
    // sum_k z^k / (2k + s)!, s = 0 or 1, by Horner on the ratio of successive terms
    let s = if odd { 1.0 } else { 0.0 };
    let mut acc = Complex::new(1.0, 0.0);
    for k in (1..SERIES_TERMS).rev() {
        let k = k as f64;
        let denom = (2.0 * k + s) * (2.0 * k + s - 1.0);
        acc = Complex::new(1.0, 0.0) + z / denom * acc;
    }
    acc
}

pub fn cah(z: Complex) -> Complex {
    if z.norm() <= SERIES_RADIUS {
        series(z, false)
    } else {
        z.sqrt().cosh()
    }
}

pub fn sah(z: Complex) -> Complex {
    if z.norm() <= SERIES_RADIUS {
        series(z, true)
    } else {
        let w = z.sqrt();
        w.sinh() / w
    }
}

pub fn tah(z: Complex) -> Result<Complex> {
    if !(z.re > TAH_DOMAIN_EDGE) {
        return Err(Error::Domain {
            what: "tah",
            value: format!("{z}"),
            domain: "Re z > -pi^2/4",
        });
    }
    if z.norm() <= SERIES_RADIUS {
        return Ok(series(z, true) / series(z, false));
    }
    let w = z.sqrt();
    let e = (-2.0 * w).exp();
    Ok((1.0 - e) / ((1.0 + e) * w))
}

/// Principal square root of `i lambda`; its real part is `sqrt(|lambda|/2) >= 0`.
fn root_axis(lambda: f64) -> Complex {
    let r = (0.5 * lambda.abs()).sqrt();
    Complex::new(r, r.copysign(lambda))
}

/// Continuous logarithm of `cah(i lambda)` along the real `lambda` axis,
/// vanishing at `lambda = 0`.
///
/// `log cosh(w) = w - ln 2 + Log(1 + exp(-2w))` with `Re w >= 0`, and
/// `1 + exp(-2w)` stays in the open right half-plane, so the principal
/// logarithm never crosses its cut.
pub fn log_cah_axis(lambda: f64) -> Complex {
    let z = Complex::new(0.0, lambda);
    if lambda.abs() <= SERIES_RADIUS {
        return series(z, false).ln();
    }
    let w = root_axis(lambda);
    w - LN_2 + (1.0 + (-2.0 * w).exp()).ln()
}

/// The branch of `sqrt(cah(i lambda))` that is continuous in `lambda` and
/// equal to 1 at `lambda = 0`.
pub fn sqrt_cah_axis(lambda: f64) -> Complex {
    (0.5 * log_cah_axis(lambda)).exp()
}

/// `1 / sqrt(cah(i lambda))` on the same branch; underflows gracefully.
pub fn inv_sqrt_cah_axis(lambda: f64) -> Complex {
    (-0.5 * log_cah_axis(lambda)).exp()
}

/// `1 / cah(i lambda)`.
pub fn inv_cah_axis(lambda: f64) -> Complex {
    let z = Complex::new(0.0, lambda);
    if lambda.abs() <= SERIES_RADIUS {
        return series(z, false).inv();
    }
    let w = root_axis(lambda);
    let e = (-w).exp();
    2.0 * e / (1.0 + e * e)
}

/// `tah(i lambda)`, always inside the domain.
pub fn tah_axis(lambda: f64) -> Complex {
    let z = Complex::new(0.0, lambda);
    if lambda.abs() <= SERIES_RADIUS {
        return series(z, true) / series(z, false);
    }
    let w = root_axis(lambda);
    let e = (-2.0 * w).exp();
    (1.0 - e) / ((1.0 + e) * w)
}

/// Below this the remainders use their Taylor series; the direct quotients
/// lose about `eps / x^4` to cancellation.
const REMAINDER_SWITCH: f64 = 1.0;
const REMAINDER_TERMS: usize = 12;

/// `sum_k (-1)^k x^{2k} / (2k + offset)!` by Horner.
fn remainder_series(x: f64, offset: usize) -> f64 {
    let x2 = x * x;
    let mut acc = 0.0;
    for k in (0..REMAINDER_TERMS).rev() {
        let d = 2 * k + offset;
        acc = 1.0 - x2 * acc / ((d + 1) * (d + 2)) as f64;
    }
    acc / (1..=offset).fold(1.0, |f, k| f * k as f64)
}

/// `(cos x - 1 + x^2/2) / x^4`, analytically continued at 0.
pub fn c_remainder(x: f64) -> f64 {
    if x.abs() < REMAINDER_SWITCH {
        remainder_series(x, 4)
    } else {
        let x2 = x * x;
        (x.cos() - 1.0 + 0.5 * x2) / (x2 * x2)
    }
}

/// `(sin x - x) / x^3`, analytically continued at 0.
pub fn s_remainder(x: f64) -> f64 {
    if x.abs() < REMAINDER_SWITCH {
        -remainder_series(x, 3)
    } else {
        (x.sin() - x) / (x * x * x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// 30-term power series, independent of the Horner evaluation above.
    fn series_oracle(z: Complex, odd: bool) -> Complex {
        let mut fact = 1.0f64;
        let mut sum = Complex::new(0.0, 0.0);
        let mut zk = Complex::new(1.0, 0.0);
        for k in 0..30usize {
            if k > 0 {
                fact *= (2 * k) as f64 * (2 * k - 1) as f64;
            }
            let f = if odd { fact * (2 * k + 1) as f64 } else { fact };
            sum += zk / f;
            zk *= z;
        }
        sum
    }

    #[test]
    fn cah_examples() {
        assert_eq!(cah(Complex::new(0.0, 0.0)), Complex::new(1.0, 0.0));
        let one = Complex::new(1.0, 0.0);
        assert_abs_diff_eq!(cah(one).re, series_oracle(one, false).re, epsilon = 1e-14);
        assert_abs_diff_eq!(cah(one).re, 1.5430806348152437, epsilon = 1e-12);
        let zero = cah(Complex::new(-PI * PI / 4.0, 0.0));
        assert!(zero.norm() < 1e-12);
    }

    #[test]
    fn sah_examples() {
        assert_eq!(sah(Complex::new(0.0, 0.0)), Complex::new(1.0, 0.0));
        assert!(sah(Complex::new(-PI * PI, 0.0)).norm() < 1e-12);
        let one = Complex::new(1.0, 0.0);
        assert_abs_diff_eq!(sah(one).re, series_oracle(one, true).re, epsilon = 1e-14);
        assert_abs_diff_eq!(sah(one).re, 1.1752011936438014, epsilon = 1e-12);
    }

    #[test]
    fn tah_examples() {
        assert_eq!(tah(Complex::new(0.0, 0.0)).unwrap(), Complex::new(1.0, 0.0));
        let one = Complex::new(1.0, 0.0);
        let ratio = series_oracle(one, true) / series_oracle(one, false);
        assert_abs_diff_eq!(tah(one).unwrap().re, ratio.re, epsilon = 1e-14);
        assert_abs_diff_eq!(tah(one).unwrap().re, 0.7615941559557649, epsilon = 1e-12);
        for &l in &[-1e6, -300.0, -2.0, 0.5, 3.0, 1e4, 1e8] {
            let v = tah(Complex::new(0.0, l)).unwrap();
            assert!(v.re.is_finite() && v.im.is_finite());
            assert!((v - tah_axis(l)).norm() < 1e-14 * (1.0 + v.norm()));
        }
        assert!(tah(Complex::new(-3.0, 0.0)).is_err());
        assert!(tah(Complex::new(TAH_DOMAIN_EDGE, 1.0)).is_err());
    }

    #[test]
    fn crossover_is_seamless() {
        for &r in &[1.0 - 1e-9, 1.0 + 1e-9] {
            for k in 0..16 {
                let z = Complex::from_polar(r, k as f64 * PI / 8.0);
                let c = series_oracle(z, false);
                let s = series_oracle(z, true);
                assert!((cah(z) - c).norm() < 1e-13);
                assert!((sah(z) - s).norm() < 1e-13);
            }
        }
    }

    /// Walks `lambda` from 0 in steps of `step`, tracking the unwrapped
    /// argument of `cah(i lambda)`.
    fn phase_walk(lambda: f64, step: f64) -> Complex {
        let n = (lambda.abs() / step).ceil().max(1.0) as usize;
        let h = lambda / n as f64;
        let mut arg = 0.0;
        let mut prev = Complex::new(1.0, 0.0);
        for k in 1..=n {
            let cur = cah(Complex::new(0.0, k as f64 * h));
            arg += (cur / prev).arg();
            prev = cur;
        }
        Complex::from_polar(prev.norm().sqrt(), 0.5 * arg)
    }

    #[test]
    fn sqrt_branch_matches_phase_walk() {
        assert_eq!(sqrt_cah_axis(0.0), Complex::new(1.0, 0.0));
        for &l in &[0.3, 1.0, 7.5, 50.0, -50.0, 120.0] {
            let walk = phase_walk(l, 1e-3);
            let got = sqrt_cah_axis(l);
            assert!((got - walk).norm() < 1e-9 * walk.norm(), "lambda={l}: {got} vs {walk}");
            let sq = got * got;
            let target = cah(Complex::new(0.0, l));
            assert!((sq - target).norm() < 1e-10 * target.norm());
        }
        let a = sqrt_cah_axis(13.0);
        let b = sqrt_cah_axis(-13.0);
        assert!((a - b.conj()).norm() < 1e-14 * a.norm());
    }

    #[test]
    fn sqrt_branch_is_continuous_and_squares_back() {
        let mut prev = sqrt_cah_axis(-1e4);
        let mut lambda = -1e4;
        let h = 1e-3;
        let mut max_jump: f64 = 0.0;
        while lambda < 1e4 {
            lambda += h;
            let cur = sqrt_cah_axis(lambda);
            max_jump = max_jump.max((cur - prev).norm() / cur.norm().max(1.0));
            prev = cur;
        }
        assert!(max_jump < 1e-2, "max relative jump {max_jump}");
        for k in -40..=40 {
            let l = k as f64 * 250.0;
            let s = sqrt_cah_axis(l);
            let target = Complex::new(0.0, l).sqrt().cosh();
            assert!((s * s - target).norm() <= 1e-10 * target.norm());
        }
    }

    #[test]
    fn remainder_examples() {
        assert_eq!(c_remainder(0.0), 1.0 / 24.0);
        assert_eq!(s_remainder(0.0), -1.0 / 6.0);
        assert_abs_diff_eq!(c_remainder(PI), (-2.0 + PI * PI / 2.0) / PI.powi(4), epsilon = 1e-15);
        assert_abs_diff_eq!(s_remainder(PI), -1.0 / (PI * PI), epsilon = 1e-15);
    }

    #[test]
    fn remainder_series_matches_high_order_oracle() {
        // 12-term Taylor series of cos and sin remainders
        let oracle = |x: f64| {
            let (mut c, mut s) = (0.0, 0.0);
            let mut fact = 24.0; // 4!
            let mut sign = 1.0;
            for k in 0..12 {
                c += sign * x.powi(2 * k) / fact;
                fact *= ((2 * k + 5) * (2 * k + 6)) as f64;
                sign = -sign;
            }
            let mut fact = 6.0; // 3!
            let mut sign = -1.0;
            for k in 0..12 {
                s += sign * x.powi(2 * k) / fact;
                fact *= ((2 * k + 4) * (2 * k + 5)) as f64;
                sign = -sign;
            }
            (c, s)
        };
        for &x in &[1e-3, 5e-3, 1e-2, 0.3, 0.999, 1.001, 1.5] {
            let (c, s) = oracle(x);
            assert_abs_diff_eq!(c_remainder(x), c, epsilon = 1e-12);
            assert_abs_diff_eq!(s_remainder(x), s, epsilon = 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn hyperbolic_identities(r in 1e-3..5.0f64, theta in 0.0..(2.0 * PI)) {
            let a = Complex::from_polar(r, theta);
            let z = a * a;
            let ch = a.cosh();
            let sh = a.sinh() / a;
            prop_assert!((cah(z) - ch).norm() <= 1e-12 * ch.norm().max(1e-300) + 1e-14);
            prop_assert!((sah(z) - sh).norm() <= 1e-12 * sh.norm().max(1e-300) + 1e-14);
        }

        #[test]
        fn remainders_are_even(x in -20.0..20.0f64) {
            prop_assert_eq!(c_remainder(-x), c_remainder(x));
            prop_assert_eq!(s_remainder(-x), s_remainder(x));
        }
    }
}
