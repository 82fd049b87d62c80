//! Characteristic function of `xi = (-1/2 int W^2, int W, W_1)`.
//!
//! Two independent evaluations: the closed form in terms of `cah`/`tah`, and
//! the truncated infinite product obtained from the Karhunen-Loeve expansion
//! of the Brownian path.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::special::{inv_cah_axis, log_cah_axis, tah_axis, Complex};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreqPoint {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
}

impl FreqPoint {
    pub const ORIGIN: FreqPoint = FreqPoint {
        lambda: 0.0,
        mu: 0.0,
        nu: 0.0,
    };

    pub fn new(lambda: f64, mu: f64, nu: f64) -> Self {
        FreqPoint { lambda, mu, nu }
    }

    pub fn neg(self) -> Self {
        FreqPoint::new(-self.lambda, -self.mu, -self.nu)
    }
}

/// For fixed `lambda`, `u(lambda, mu, nu) = amp * exp(-(a mu^2 + b mu nu + c nu^2))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadCoeffs {
    pub lambda: f64,
    pub log_amp: Complex,
    pub a: Complex,
    pub b: Complex,
    pub c: Complex,
}

const SMALL_LAMBDA: f64 = 1.0;
const COEFF_TERMS: usize = 24;

impl QuadCoeffs {
    pub fn new(lambda: f64) -> Self {
        let log_cah = log_cah_axis(lambda);
        let log_amp = -0.5 * log_cah;
        let z = Complex::new(0.0, lambda);
        if lambda.abs() <= SMALL_LAMBDA {
            // cah - sah = sum_{k>=1} z^k 2k/(2k+1)!,  cah - 1 = sum_{k>=1} z^k/(2k)!
            let mut num_a = Complex::new(0.0, 0.0);
            let mut num_b = Complex::new(0.0, 0.0);
            for k in (1..COEFF_TERMS).rev() {
                let kf = k as f64;
                let even_fact = factorial(2 * k);
                num_a = num_a * z + 2.0 * kf / (even_fact * (2.0 * kf + 1.0));
                num_b = num_b * z + 1.0 / even_fact;
            }
            let cah = log_cah.exp();
            let tah = tah_axis(lambda);
            QuadCoeffs {
                lambda,
                log_amp,
                a: num_a / (2.0 * cah),
                b: num_b / cah,
                c: 0.5 * tah,
            }
        } else {
            let tah = tah_axis(lambda);
            QuadCoeffs {
                lambda,
                log_amp,
                a: (1.0 - tah) / (2.0 * z),
                b: (1.0 - inv_cah_axis(lambda)) / z,
                c: 0.5 * tah,
            }
        }
    }

    pub fn exponent(&self, mu: f64, nu: f64) -> Complex {
        self.log_amp - (self.a * mu * mu + self.b * mu * nu + self.c * nu * nu)
    }

    pub fn eval(&self, mu: f64, nu: f64) -> Complex {
        self.exponent(mu, nu).exp()
    }

    /// Complex symmetric matrix `Q` with `a mu^2 + b mu nu + c nu^2 = 1/2 (mu,nu) Q (mu,nu)^T`.
    pub fn q_matrix(&self) -> [[Complex; 2]; 2] {
        [[2.0 * self.a, self.b], [self.b, 2.0 * self.c]]
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

pub fn log_closed_form(q: FreqPoint) -> Complex {
    QuadCoeffs::new(q.lambda).exponent(q.mu, q.nu)
}

pub fn closed_form(q: FreqPoint) -> Complex {
    log_closed_form(q).exp()
}

fn mode_frequency(n: u64) -> f64 {
    let h = n as f64 + 0.5;
    PI * PI * h * h
}

fn mode_weight(n: u64) -> f64 {
    let s = if n % 2 == 0 { 1.0 } else { -1.0 };
    s / (PI * (n as f64 + 0.5))
}

pub fn log_factor(n: u64, q: FreqPoint) -> Complex {
    let k = mode_frequency(n);
    let lin = mode_weight(n) * q.mu + q.nu;
    let log_arg = Complex::new(1.0, q.lambda / k);
    -0.5 * log_arg.ln() - lin * lin / Complex::new(k, q.lambda)
}

pub fn factor(n: u64, q: FreqPoint) -> Complex {
    log_factor(n, q).exp()
}

#[derive(Debug, Clone, Copy, Default)]
struct KahanSum {
    sum: Complex,
    comp: Complex,
}

impl KahanSum {
    fn add(&mut self, v: Complex) {
        let y = v - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }
}

pub fn log_product_form(q: FreqPoint, n_terms: u64) -> Complex {
    let mut acc = KahanSum::default();
    for n in 0..n_terms {
        acc.add(log_factor(n, q));
    }
    acc.sum
}

pub fn product_form(q: FreqPoint, n_terms: u64) -> Complex {
    assert!(n_terms >= 1, "product_form needs at least one factor");
    log_product_form(q, n_terms).exp()
}

/// Partial sums of the log-product at fixed `lambda`, split by monomial in
/// `(mu, nu)` so that a whole `(mu, nu)` plane costs one pass over the modes.
#[derive(Debug, Clone, Copy)]
pub struct ProductSlice {
    pub lambda: f64,
    pub n_terms: u64,
    s0: Complex,
    s_mm: Complex,
    s_mn: Complex,
    s_nn: Complex,
}

impl ProductSlice {
    pub fn new(lambda: f64, n_terms: u64) -> Self {
        let (mut s0, mut s_mm, mut s_mn, mut s_nn) = (
            KahanSum::default(),
            KahanSum::default(),
            KahanSum::default(),
            KahanSum::default(),
        );
        for n in 0..n_terms {
            let k = mode_frequency(n);
            let alpha = mode_weight(n);
            let inv = Complex::new(k, lambda).inv();
            s0.add(-0.5 * Complex::new(1.0, lambda / k).ln());
            s_mm.add(alpha * alpha * inv);
            s_mn.add(2.0 * alpha * inv);
            s_nn.add(inv);
        }
        ProductSlice {
            lambda,
            n_terms,
            s0: s0.sum,
            s_mm: s_mm.sum,
            s_mn: s_mn.sum,
            s_nn: s_nn.sum,
        }
    }

    pub fn log_eval(&self, mu: f64, nu: f64) -> Complex {
        self.s0 - (self.s_mm * mu * mu + self.s_mn * mu * nu + self.s_nn * nu * nu)
    }

    pub fn eval(&self, mu: f64, nu: f64) -> Complex {
        self.log_eval(mu, nu).exp()
    }
}

/// Upper bound on `|log u - log product_form(q, n_terms)|`.
///
/// Uses `|ln(1 + ix)| <= |x|`, `|k + i lambda| >= k` and
/// `sum_{n>=N} (n + 1/2)^{-2} <= 1/N`.
pub fn tail_bound(q: FreqPoint, n_terms: u64) -> f64 {
    assert!(n_terms >= 1, "tail_bound needs n_terms >= 1");
    let lin = 2.0 * q.mu.abs() / PI + q.nu.abs();
    (0.5 * q.lambda.abs() + lin * lin) / (PI * PI * n_terms as f64)
}

/// Bound on `|u - product_form|` given the truncated value and its log-tail bound.
pub fn lifted_bound(product: Complex, log_bound: f64) -> f64 {
    product.norm() * log_bound.exp_m1()
}

/// Outcome of comparing the two evaluations over a frequency box.
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub max_disagreement: f64,
    pub max_certified_truncation: f64,
    pub worst_point: FreqPoint,
    pub terms_per_lambda: Vec<(f64, u64)>,
}

/// Smallest power-of-two multiple of `start` for which the lifted truncation
/// bound on every `(mu, nu)` of the slice falls below `target`.
pub fn certified_slice(lambda: f64, mus: &[f64], nus: &[f64], target: f64, start: u64) -> ProductSlice {
    let mut n = start.max(1);
    loop {
        let slice = ProductSlice::new(lambda, n);
        let worst = mus
            .iter()
            .flat_map(|&mu| nus.iter().map(move |&nu| (mu, nu)))
            .map(|(mu, nu)| {
                lifted_bound(slice.eval(mu, nu), tail_bound(FreqPoint::new(lambda, mu, nu), n))
            })
            .fold(0.0f64, f64::max);
        if worst <= target || n >= 1 << 30 {
            return slice;
        }
        n *= 2;
    }
}

/// Compares closed and product forms on the tensor grid `lambdas x mus x nus`,
/// choosing the truncation per `lambda` so that the certified error is below
/// `certify`.
pub fn compare_grid(lambdas: &[f64], mus: &[f64], nus: &[f64], certify: f64, start: u64) -> Comparison {
    use rayon::prelude::*;
    let per_lambda: Vec<(f64, u64, f64, f64, FreqPoint)> = lambdas
        .par_iter()
        .map(|&lambda| {
            let slice = certified_slice(lambda, mus, nus, certify, start);
            let coeffs = QuadCoeffs::new(lambda);
            let mut worst = (0.0f64, 0.0f64, FreqPoint::new(lambda, 0.0, 0.0));
            for &mu in mus {
                for &nu in nus {
                    let prod = slice.eval(mu, nu);
                    let diff = (coeffs.eval(mu, nu) - prod).norm();
                    let cert =
                        lifted_bound(prod, tail_bound(FreqPoint::new(lambda, mu, nu), slice.n_terms));
                    if diff > worst.0 {
                        worst.0 = diff;
                        worst.2 = FreqPoint::new(lambda, mu, nu);
                    }
                    worst.1 = worst.1.max(cert);
                }
            }
            (lambda, slice.n_terms, worst.0, worst.1, worst.2)
        })
        .collect();
    let mut out = Comparison {
        max_disagreement: 0.0,
        max_certified_truncation: 0.0,
        worst_point: FreqPoint::ORIGIN,
        terms_per_lambda: Vec::with_capacity(per_lambda.len()),
    };
    for (lambda, n, diff, cert, at) in per_lambda {
        if diff > out.max_disagreement {
            out.max_disagreement = diff;
            out.worst_point = at;
        }
        out.max_certified_truncation = out.max_certified_truncation.max(cert);
        out.terms_per_lambda.push((lambda, n));
    }
    out
}

/// `exp(-mu^2/6 - mu nu/2 - nu^2/2)`, the `lambda = 0` slice.
pub fn gaussian_slice(mu: f64, nu: f64) -> f64 {
    (-mu * mu / 6.0 - mu * nu / 2.0 - nu * nu / 2.0).exp()
}
