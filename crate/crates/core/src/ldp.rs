//! Large-deviation rates: the macroscopic rate in closed form, a variational
//! solver for the mesoscopic rate and a shooting solver for pendulum curves.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scaling::Point;

/// A rate value. Infinity is a flag, never a float in arithmetic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rate {
    Finite(f64),
    Infinite,
}

impl Rate {
    pub fn is_finite(self) -> bool {
        matches!(self, Rate::Finite(_))
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Rate::Finite(v) => Some(v),
            Rate::Infinite => None,
        }
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("Rate", 2)?;
        st.serialize_field("infinite", &!self.is_finite())?;
        st.serialize_field("value", &self.value())?;
        st.end()
    }
}

/// Rate of the macroscopic large deviation principle.
pub fn i_macro(p: Point) -> Rate {
    if p.x.abs() <= 1e-12 && p.y.abs() <= 1e-12 {
        Rate::Finite(0.5 * p.phi * p.phi)
    } else {
        Rate::Infinite
    }
}

/// Angle curve on `n + 1` uniform nodes of `[0, 1]` starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curve {
    values: Vec<f64>,
}

impl Curve {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 3 {
            return Err(Error::InvalidInput(format!("a curve needs n >= 2 intervals, got {}", values.len().saturating_sub(1))));
        }
        if values[0] != 0.0 {
            return Err(Error::InvalidInput(format!("curve must start at 0, got {}", values[0])));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("curve values must be finite".into()));
        }
        Ok(Curve { values })
    }

    /// Samples `f` at `t_i = i / n`. `f(0)` is replaced by 0.
    pub fn from_fn(n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let mut v: Vec<f64> = (0..=n).map(|i| f(i as f64 / n as f64)).collect();
        if let Some(first) = v.first_mut() {
            *first = 0.0;
        }
        Curve::new(v)
    }

    pub fn n(&self) -> usize {
        self.values.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn end(&self) -> f64 {
        self.values[self.n()]
    }

    /// `gamma -> -gamma`.
    pub fn negated(&self) -> Curve {
        Curve {
            values: self.values.iter().map(|v| -v + 0.0).collect(),
        }
    }

    /// CSV with header `t,gamma`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,gamma")?;
        let n = self.n() as f64;
        for (i, g) in self.values.iter().enumerate() {
            writeln!(w, "{:.16e},{:.16e}", i as f64 / n, g)?;
        }
        Ok(())
    }
}

/// `(int cos gamma, int sin gamma, gamma(1))` by the trapezoid rule.
pub fn endpoint_map(c: &Curve) -> Point {
    let v = &c.values;
    let n = c.n();
    let h = 1.0 / n as f64;
    let (mut sx, mut sy) = (0.5 * (v[0].cos() + v[n].cos()), 0.5 * (v[0].sin() + v[n].sin()));
    for g in &v[1..n] {
        sx += g.cos();
        sy += g.sin();
    }
    Point::new(h * sx, h * sy, v[n])
}

/// Discrete Dirichlet energy `1/2 sum (d gamma)^2 / dt`.
pub fn energy(c: &Curve) -> f64 {
    let n = c.n() as f64;
    0.5 * n * c.values.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>()
}

/// `gamma(1)^2 / 2`, a lower bound on the energy of any curve ending at that angle.
pub fn lower_bound_certificate(c: &Curve) -> f64 {
    0.5 * c.end() * c.end()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LdpOptions {
    pub n: usize,
    pub starts: usize,
    pub outer_iterations: usize,
    pub penalty_growth: f64,
    pub constraint_tol: f64,
    pub inner_iterations: usize,
    pub memory: usize,
}

impl Default for LdpOptions {
    fn default() -> Self {
        LdpOptions {
            n: 256,
            starts: 8,
            outer_iterations: 20,
            penalty_growth: 10.0,
            constraint_tol: 1e-6,
            inner_iterations: 3000,
            memory: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateResult {
    pub value: Rate,
    pub curve: Option<Curve>,
    /// Endpoint residuals `(rx, ry, rphi)` of the returned curve.
    pub residuals: [f64; 3],
    /// Constraint residuals below tolerance at a converged local minimum.
    pub certified: bool,
    pub start: Option<usize>,
}

/// Outcome of one limited-memory quasi-Newton solve.
#[derive(Debug, Clone, Copy)]
pub struct LbfgsOutcome {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimises `f` from `x` with L-BFGS and a backtracking Armijo line search.
/// `f` writes the gradient into its second argument and returns the value.
pub fn lbfgs<F>(x: &mut [f64], mut f: F, memory: usize, max_iter: usize, grad_tol: f64) -> LbfgsOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut fx = f(x, &mut g);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut d = vec![0.0; n];
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    for it in 0..max_iter {
        if norm(&g) <= grad_tol {
            return LbfgsOutcome {
                value: fx,
                iterations: it,
                converged: true,
            };
        }
        // two-loop recursion
        d.copy_from_slice(&g);
        let m = s_hist.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            alpha[i] = rho_hist[i] * dot(&s_hist[i], &d);
            axpy(-alpha[i], &y_hist[i], &mut d);
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let gn0 = norm(&g).max(1.0);
            d.iter_mut().for_each(|v| *v /= gn0);
        }
        for i in 0..m {
            let beta = rho_hist[i] * dot(&y_hist[i], &d);
            axpy(alpha[i] - beta, &s_hist[i], &mut d);
        }
        d.iter_mut().for_each(|v| *v = -*v);
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            // not a descent direction: restart from steepest descent
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            let gn0 = norm(&g).max(1.0);
            for (di, gi) in d.iter_mut().zip(&g) {
                *di = -gi / gn0;
            }
            slope = dot(&g, &d);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                xn[i] = x[i] + step * d[i];
            }
            let fnew = f(&xn, &mut gn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope {
                accepted = true;
                let s: Vec<f64> = (0..n).map(|i| xn[i] - x[i]).collect();
                let y: Vec<f64> = (0..n).map(|i| gn[i] - g[i]).collect();
                let sy = dot(&s, &y);
                x.copy_from_slice(&xn);
                g.copy_from_slice(&gn);
                let improvement = fx - fnew;
                fx = fnew;
                if sy > 1e-16 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                    if s_hist.len() == memory {
                        s_hist.remove(0);
                        y_hist.remove(0);
                        rho_hist.remove(0);
                    }
                    rho_hist.push(1.0 / sy);
                    s_hist.push(s);
                    y_hist.push(y);
                }
                if improvement <= 1e-16 * fx.abs().max(1e-300) && norm(&g) <= grad_tol * 1e3 {
                    return LbfgsOutcome {
                        value: fx,
                        iterations: it + 1,
                        converged: true,
                    };
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            let small = norm(&g) <= grad_tol * 1e3;
            return LbfgsOutcome {
                value: fx,
                iterations: it,
                converged: small,
            };
        }
    }
    LbfgsOutcome {
        value: fx,
        iterations: max_iter,
        converged: norm(&g) <= grad_tol,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Scaled sine basis: `gamma_i = phi t_i + sum_k M_ik b_k` for interior nodes,
/// in which the discrete energy is `phi^2 / 2 + |b|^2`.
struct SineBasis {
    n: usize,
    /// Row-major `(n - 1) x (n - 1)`.
    m: Vec<f64>,
    /// `b_k` per unit `a_k`.
    scale: Vec<f64>,
}

impl SineBasis {
    fn new(n: usize) -> Self {
        let k = n - 1;
        let scale: Vec<f64> = (1..n)
            .map(|j| n as f64 * (PI * j as f64 / (2 * n) as f64).sin())
            .collect();
        let mut m = vec![0.0; k * k];
        for i in 1..n {
            for j in 1..n {
                let s = (PI * ((i * j) % (2 * n)) as f64 / n as f64).sin();
                m[(i - 1) * k + (j - 1)] = s / scale[j - 1];
            }
        }
        SineBasis { n, m, scale }
    }

    fn curve(&self, phi: f64, b: &[f64], out: &mut [f64]) {
        let n = self.n;
        let k = n - 1;
        out[0] = 0.0;
        out[n] = phi;
        for i in 1..n {
            let row = &self.m[(i - 1) * k..i * k];
            out[i] = phi * i as f64 / n as f64 + dot(row, b);
        }
    }

    /// `b` for a given curve with `gamma(1) = phi`.
    fn coefficients(&self, c: &[f64]) -> Vec<f64> {
        let n = self.n;
        let phi = c[n];
        let r: Vec<f64> = (1..n).map(|i| c[i] - phi * i as f64 / n as f64).collect();
        (1..n)
            .map(|j| {
                let a: f64 = (1..n)
                    .map(|i| (PI * ((i * j) % (2 * n)) as f64 / n as f64).sin() * r[i - 1])
                    .sum::<f64>()
                    * 2.0
                    / n as f64;
                a * self.scale[j - 1]
            })
            .collect()
    }

    /// `g_b = M^T g_interior`.
    fn pull_back(&self, g_interior: &[f64], out: &mut [f64]) {
        let k = self.n - 1;
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..k {
            let gi = g_interior[i];
            if gi != 0.0 {
                axpy(gi, &self.m[i * k..(i + 1) * k], out);
            }
        }
    }
}

/// Starting curves: the straight line, winding shapes
/// `phi t + 2 pi k sin(pi t)` and paired sinusoidal perturbations.
fn start_curves(phi: f64, n: usize, count: usize) -> Vec<Curve> {
    let mut shapes: Vec<Box<dyn Fn(f64) -> f64>> = vec![Box::new(move |t| phi * t)];
    for k in [1.0, -1.0, 2.0, -2.0] {
        shapes.push(Box::new(move |t| phi * t + TAU * k * (PI * t).sin()));
    }
    for a in [PI, -PI] {
        shapes.push(Box::new(move |t| phi * t + a * (TAU * t).sin()));
    }
    for a in [0.5, -0.5] {
        shapes.push(Box::new(move |t| phi * t + a * (PI * t).sin()));
    }
    let mut extra = 2.0;
    while shapes.len() < count {
        let a = extra;
        shapes.push(Box::new(move |t| phi * t + a * (3.0 * PI * t).sin()));
        shapes.push(Box::new(move |t| phi * t - a * (3.0 * PI * t).sin()));
        extra += 1.0;
    }
    shapes
        .iter()
        .take(count)
        .map(|f| Curve::from_fn(n, f).expect("finite start"))
        .collect()
}

struct SolveOutcome {
    curve: Curve,
    energy: f64,
    residual: [f64; 3],
    converged: bool,
}

fn solve_from(basis: &SineBasis, target: Point, start: &Curve, opts: &LdpOptions) -> SolveOutcome {
    let n = basis.n;
    let h = 1.0 / n as f64;
    let phi = target.phi;
    let mut b = basis.coefficients(start.values());
    let mut gamma = vec![0.0; n + 1];
    let mut gint = vec![0.0; n - 1];
    let mut lam = [0.0f64; 2];
    // trapezoid constant from the fixed end node
    let end_cos = 0.5 * h * phi.cos();
    let end_sin = 0.5 * h * phi.sin();
    let constraint = |gamma: &[f64]| {
        let (mut cx, mut cy) = (0.5 * h + end_cos, end_sin);
        for g in &gamma[1..n] {
            cx += h * g.cos();
            cy += h * g.sin();
        }
        [cx - target.x, cy - target.y]
    };
    basis.curve(phi, &b, &mut gamma);
    let c0 = constraint(&gamma);
    let e0 = 0.5 * phi * phi + dot(&b, &b);
    // penalty comparable to the start's energy, so that the start is not
    // abandoned for the unconstrained minimum
    let mut rho = (10.0 * e0.max(1.0) / (c0[0] * c0[0] + c0[1] * c0[1]).max(1e-4)).clamp(10.0, 1e6);
    let mut prev = c0[0].hypot(c0[1]);
    let mut inner_ok = false;
    for _ in 0..opts.outer_iterations {
        let l = lam;
        let r = rho;
        let tol = 1e-9 * (1.0 + e0.sqrt() + r.sqrt());
        let out = lbfgs(
            &mut b,
            |bb, grad| {
                basis.curve(phi, bb, &mut gamma);
                let c = constraint(&gamma);
                let (mx, my) = (l[0] + r * c[0], l[1] + r * c[1]);
                for i in 1..n {
                    let (s, co) = gamma[i].sin_cos();
                    gint[i - 1] = h * (-mx * s + my * co);
                }
                basis.pull_back(&gint, grad);
                let mut f = l[0] * c[0] + l[1] * c[1] + 0.5 * r * (c[0] * c[0] + c[1] * c[1]);
                for (gk, bk) in grad.iter_mut().zip(bb) {
                    *gk += 2.0 * bk;
                    f += bk * bk;
                }
                f
            },
            opts.memory,
            opts.inner_iterations,
            tol,
        );
        inner_ok = out.converged;
        basis.curve(phi, &b, &mut gamma);
        let res = constraint(&gamma);
        let norm = res[0].hypot(res[1]);
        if inner_ok && norm <= opts.constraint_tol {
            break;
        }
        lam[0] += rho * res[0];
        lam[1] += rho * res[1];
        if norm > 0.25 * prev {
            rho = (rho * opts.penalty_growth).min(1e9);
        }
        prev = norm;
    }
    basis.curve(phi, &b, &mut gamma);
    let curve = Curve::new(gamma).expect("finite curve");
    let e = endpoint_map(&curve);
    let residual = [e.x - target.x, e.y - target.y, e.phi - target.phi];
    let converged = inner_ok && residual.iter().all(|r| r.abs() <= opts.constraint_tol);
    SolveOutcome {
        energy: energy(&curve),
        curve,
        residual,
        converged,
    }
}

/// Mesoscopic rate: minimum energy over curves with `endpoint_map = p`.
pub fn i_meso(p: Point, opts: &LdpOptions) -> Result<RateResult> {
    if !p.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite point {p:?}")));
    }
    if opts.n < 2 || opts.starts == 0 {
        return Err(Error::InvalidInput("need n >= 2 and at least one start".into()));
    }
    let r = p.x.hypot(p.y);
    let is_rest = (p.x - 1.0).abs() <= 1e-12 && p.y.abs() <= 1e-12 && p.phi.abs() <= 1e-12;
    if r >= 1.0 && !is_rest {
        return Ok(RateResult {
            value: Rate::Infinite,
            curve: None,
            residuals: [0.0; 3],
            certified: true,
            start: None,
        });
    }
    let basis = SineBasis::new(opts.n);
    let starts = start_curves(p.phi, opts.n, opts.starts);
    let outcomes: Vec<SolveOutcome> = starts
        .par_iter()
        .map(|s| solve_from(&basis, p, s, opts))
        .collect();
    // lowest energy among certified solves; lowest index breaks ties
    let pick = |only_converged: bool| {
        outcomes
            .iter()
            .enumerate()
            .filter(|(_, o)| o.converged || !only_converged)
            .fold(None::<(usize, &SolveOutcome)>, |best, (i, o)| match best {
                Some((_, b)) if b.energy <= o.energy => best,
                _ => Some((i, o)),
            })
    };
    let (idx, best, certified) = match pick(true) {
        Some((i, o)) => (i, o, true),
        None => {
            let (i, o) = outcomes
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    let ra = a.1.residual[0].hypot(a.1.residual[1]);
                    let rb = b.1.residual[0].hypot(b.1.residual[1]);
                    ra.total_cmp(&rb)
                })
                .expect("at least one start");
            log::warn!("i_meso at {p:?} did not converge, residuals {:?}", o.residual);
            (i, o, false)
        }
    };
    Ok(RateResult {
        value: Rate::Finite(best.energy),
        curve: Some(best.curve.clone()),
        residuals: best.residual,
        certified,
        start: Some(idx),
    })
}

/// Solution of the pendulum boundary problem for closed curves.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PendulumSolution {
    pub a: f64,
    pub b: f64,
    pub curve: Curve,
    pub energy: f64,
    /// `(gamma(1), gamma'(1) - b, int cos gamma)`.
    pub residuals: [f64; 3],
    pub conjectural: bool,
}

/// Complete elliptic integrals `(K(k), E(k))` by the arithmetic-geometric mean.
pub fn elliptic_ke(k: f64) -> (f64, f64) {
    let (mut a, mut b) = (1.0, (1.0 - k * k).sqrt());
    let mut c = k;
    let mut sum = 0.5 * c * c;
    let mut pow = 0.5;
    for _ in 0..64 {
        if c.abs() <= 1e-15 * a {
            break;
        }
        let an = 0.5 * (a + b);
        c = 0.5 * (a - b);
        b = (a * b).sqrt();
        a = an;
        pow *= 2.0;
        sum += pow * c * c;
    }
    let kk = PI / (2.0 * a);
    (kk, kk * (1.0 - sum))
}

/// RK4 on `(gamma, gamma', int cos gamma, int gamma'^2 / 2)`.
fn pendulum_flow(a: f64, b: f64, steps: usize, mut sample: impl FnMut(usize, f64)) -> [f64; 4] {
    let h = 1.0 / steps as f64;
    let rhs = |s: [f64; 4]| [s[1], -a * s[0].sin(), s[0].cos(), 0.5 * s[1] * s[1]];
    let mut s = [0.0, b, 0.0, 0.0];
    sample(0, 0.0);
    for i in 0..steps {
        let k1 = rhs(s);
        let k2 = rhs(std::array::from_fn(|j| s[j] + 0.5 * h * k1[j]));
        let k3 = rhs(std::array::from_fn(|j| s[j] + 0.5 * h * k2[j]));
        let k4 = rhs(std::array::from_fn(|j| s[j] + h * k3[j]));
        for j in 0..4 {
            s[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        sample(i + 1, s[0]);
    }
    s
}

/// Shoots `gamma'' = -a sin(gamma)`, `gamma(0) = 0`, `gamma'(0) = b` for a
/// 1-periodic curve with `int cos gamma = 0`. The elliptic-function solution
/// seeds a Gauss-Newton iteration.
pub fn pendulum_shoot(tol: f64, n: usize) -> Result<PendulumSolution> {
    if n < 2 {
        return Err(Error::InvalidInput("need n >= 2".into()));
    }
    // libration with modulus k: period 4K/sqrt(a), int cos = 2E/K - 1
    let (mut lo, mut hi) = (0.5f64, 0.99f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (kk, ee) = elliptic_ke(mid);
        if 2.0 * ee - kk > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let k = 0.5 * (lo + hi);
    let (kk, _) = elliptic_ke(k);
    let mut a = 16.0 * kk * kk;
    let mut b = 8.0 * k * kk;
    let steps = n * (16384 / n).max(1);
    let residual = |a: f64, b: f64| {
        let s = pendulum_flow(a, b, steps, |_, _| {});
        [s[0], s[1] - b, s[2]]
    };
    let mut r = residual(a, b);
    let norm = |r: [f64; 3]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    for _ in 0..50 {
        if norm(r) < tol {
            break;
        }
        let (ha, hb) = (1e-6 * a, 1e-6 * b);
        let ra = residual(a + ha, b);
        let rb = residual(a, b + hb);
        let ja: [f64; 3] = std::array::from_fn(|i| (ra[i] - r[i]) / ha);
        let jb: [f64; 3] = std::array::from_fn(|i| (rb[i] - r[i]) / hb);
        // normal equations for the 3x2 least-squares step
        let (saa, sab, sbb) = (dot(&ja, &ja), dot(&ja, &jb), dot(&jb, &jb));
        let (ga, gb) = (dot(&ja, &r), dot(&jb, &r));
        let det = saa * sbb - sab * sab;
        if det.abs() < 1e-300 {
            break;
        }
        a -= (sbb * ga - sab * gb) / det;
        b -= (saa * gb - sab * ga) / det;
        r = residual(a, b);
    }
    let stride = steps / n;
    let mut values = vec![0.0; n + 1];
    let s = pendulum_flow(a, b, steps, |i, g| {
        if i % stride == 0 {
            values[i / stride] = g;
        }
    });
    let residuals = [s[0], s[1] - b, s[2]];
    if norm(residuals) >= tol {
        return Err(Error::NotConverged {
            what: "pendulum shooting",
            residual: norm(residuals),
        });
    }
    Ok(PendulumSolution {
        a,
        b,
        curve: Curve::new(values)?,
        energy: s[3],
        residuals,
        conjectural: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(c: f64, n: usize) -> Curve {
        Curve::from_fn(n, |t| c * t).unwrap()
    }

    #[test]
    fn macro_rate_table() {
        assert_eq!(i_macro(Point::new(0.0, 0.0, 2.0)), Rate::Finite(2.0));
        assert_eq!(i_macro(Point::new(0.0, 0.0, 0.0)), Rate::Finite(0.0));
        assert_eq!(i_macro(Point::new(0.5, 0.0, 0.0)), Rate::Infinite);
        assert_eq!(i_macro(Point::new(0.0, 1e-9, 0.0)), Rate::Infinite);
    }

    #[test]
    fn endpoint_and_energy_examples() {
        let z = Curve::from_fn(16, |_| 0.0).unwrap();
        assert_eq!(endpoint_map(&z), Point::new(1.0, 0.0, 0.0));
        assert_eq!(energy(&z), 0.0);
        let c = 2.3;
        let mut errs = vec![];
        for n in [32, 64] {
            let e = endpoint_map(&line(c, n));
            errs.push((e.x - c.sin() / c).abs().max((e.y - (1.0 - c.cos()) / c).abs()));
            assert_eq!(e.phi, c);
            assert!((energy(&line(c, n)) - c * c / 2.0).abs() < 1e-12);
        }
        assert!((errs[0] / errs[1] - 4.0).abs() < 0.05, "{errs:?}");
        let g = Curve::from_fn(40, |t| (3.0 * t).sin() + t * t).unwrap();
        let (e, f) = (endpoint_map(&g), endpoint_map(&g.negated()));
        assert!((e.x - f.x).abs() < 1e-15 && (e.y + f.y).abs() < 1e-15 && e.phi == -f.phi);
        assert!(Curve::new(vec![0.0, 1.0]).is_err());
        assert!(Curve::new(vec![0.1, 1.0, 2.0]).is_err());
    }

    #[test]
    fn energy_refinement_monotone() {
        let g = Curve::from_fn(10, |t| (5.0 * t).sin()).unwrap();
        let refined = Curve::from_fn(40, |t| {
            let i = ((t * 10.0).floor() as usize).min(9);
            let s = t * 10.0 - i as f64;
            let base = g.values()[i] + s * (g.values()[i + 1] - g.values()[i]);
            base + 0.05 * (PI * s).sin()
        })
        .unwrap();
        assert!(energy(&g) <= energy(&refined));
    }

    #[test]
    fn sine_basis_round_trip_and_energy() {
        let basis = SineBasis::new(16);
        let c = Curve::from_fn(16, |t| 1.7 * t + (4.0 * t).sin() * t).unwrap();
        let b = basis.coefficients(c.values());
        let mut out = vec![0.0; 17];
        basis.curve(c.end(), &b, &mut out);
        for (x, y) in out.iter().zip(c.values()) {
            assert!((x - y).abs() < 1e-12);
        }
        let e = 0.5 * c.end().powi(2) + b.iter().map(|v| v * v).sum::<f64>();
        assert!((e - energy(&c)).abs() < 1e-12);
    }

    #[test]
    fn lbfgs_minimises_rosenbrock() {
        let mut x = [-1.2, 1.0];
        let out = lbfgs(
            &mut x,
            |v, g| {
                g[0] = -2.0 * (1.0 - v[0]) - 400.0 * v[0] * (v[1] - v[0] * v[0]);
                g[1] = 200.0 * (v[1] - v[0] * v[0]);
                (1.0 - v[0]).powi(2) + 100.0 * (v[1] - v[0] * v[0]).powi(2)
            },
            8,
            1000,
            1e-10,
        );
        assert!(out.converged);
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn meso_rate_examples() {
        let opts = LdpOptions::default();
        let rest = i_meso(Point::new(1.0, 0.0, 0.0), &opts).unwrap();
        assert!(rest.value.value().unwrap().abs() < 1e-6 && rest.certified);
        assert_eq!(i_meso(Point::new(0.0, 1.2, 0.0), &opts).unwrap().value, Rate::Infinite);
        assert_eq!(i_meso(Point::new(1.0, 0.0, 0.5), &opts).unwrap().value, Rate::Infinite);
        let half = i_meso(Point::new(0.0, 2.0 / PI, PI), &opts).unwrap();
        assert!(half.certified);
        assert!((half.value.value().unwrap() - PI * PI / 2.0).abs() < 1e-3);
        let full = i_meso(Point::new(0.0, 0.0, TAU), &opts).unwrap();
        assert!((full.value.value().unwrap() / (2.0 * PI * PI) - 1.0).abs() < 0.01);
    }

    #[test]
    fn meso_rate_symmetry_bound_and_refinement() {
        let opts = LdpOptions {
            n: 64,
            ..LdpOptions::default()
        };
        let p = Point::new(0.3, 0.25, 1.1);
        let a = i_meso(p, &opts).unwrap();
        let b = i_meso(Point::new(0.3, -0.25, -1.1), &opts).unwrap();
        let (va, vb) = (a.value.value().unwrap(), b.value.value().unwrap());
        assert!(a.certified && b.certified);
        assert!((va - vb).abs() < 1e-6 * va.max(1.0), "{va} {vb}");
        assert!(va >= lower_bound_certificate(a.curve.as_ref().unwrap()));
        let fine = i_meso(p, &LdpOptions { n: 128, ..opts }).unwrap();
        assert!(fine.value.value().unwrap() <= va + 1e-2 * va, "{} {va}", fine.value.value().unwrap());
    }

    #[test]
    fn elliptic_integrals() {
        let (k, e) = elliptic_ke(0.0);
        assert!((k - PI / 2.0).abs() < 1e-15 && (e - PI / 2.0).abs() < 1e-15);
        // K(1/sqrt 2) = Gamma(1/4)^2 / (4 sqrt(pi))
        let (k, e) = elliptic_ke(std::f64::consts::FRAC_1_SQRT_2);
        assert!((k - 1.854_074_677_301_372).abs() < 1e-13);
        assert!((e - 1.350_643_881_047_675_5).abs() < 1e-13);
    }

    #[test]
    fn pendulum_residuals() {
        let s = pendulum_shoot(1e-8, 256).unwrap();
        assert!(s.residuals.iter().all(|r| r.abs() < 1e-8));
        assert!(s.energy >= 2.0 * PI * PI - 1e-2);
        assert_eq!(s.curve.n(), 256);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn certificate_below_energy(coefs in proptest::collection::vec(-3.0f64..3.0, 4), n in 2usize..64) {
            let c = Curve::from_fn(n, |t| coefs.iter().enumerate().map(|(k, a)| a * t.powi(k as i32 + 1)).sum()).unwrap();
            prop_assert!(lower_bound_certificate(&c) <= energy(&c) * (1.0 + 1e-12) + 1e-12);
        }
    }
}
