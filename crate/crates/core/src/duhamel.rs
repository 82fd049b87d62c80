//! Error term of the approximate kernel and the first Duhamel correction.
//!
//! With `u_tilde` the kernel of the frozen-frame diffusion and
//! `E = (-d/dt + L*) u_tilde`, the true kernel is `u = sum_k (E*)^k u_tilde`.
//! All objects are handled in rescaled form at `p0 = 0`:
//!
//! ```text
//! E_check(tau, p) = tau^8 E_{tau^2}(0, P_{tau,0}(p))
//!                 = -C(tau phi) phi^4 du/dx(p) - S(tau phi) phi^3 du/dy(p)
//! ```
//!
//! The space-time convolution `E * u_tilde` is split at `t/2`. Each half is
//! rewritten with `s = (sigma tau)^2`, `sigma in [0, 1/sqrt 2]`, and
//! integrated against the mass of `u_check` on a coarse cell grid (one half
//! after an integration by parts), so that only nonnegative weights appear.

use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::density::{DensityGrid, GridKind, GridSpec, KernelValues, SpectralKernel};
use crate::error::{Error, Result};
use crate::scaling::{from_macro, m_check, x_check, MicroPoint, Point};
use crate::special::{c_remainder, s_remainder};

/// Pointwise access to `u_check` and its `x`/`y` derivatives.
pub trait KernelSource: Sync {
    fn values(&self, p: MicroPoint) -> Result<KernelValues>;
}

impl KernelSource for SpectralKernel {
    fn values(&self, p: MicroPoint) -> Result<KernelValues> {
        Ok(self.eval(p))
    }
}

/// Density and gradient grids sharing one spec, interpolated trilinearly.
#[derive(Debug, Clone)]
pub struct GridKernel {
    pub density: DensityGrid,
    pub dx: DensityGrid,
    pub dy: DensityGrid,
}

impl GridKernel {
    pub fn new(density: DensityGrid, dx: DensityGrid, dy: DensityGrid) -> Result<Self> {
        let same = |g: &DensityGrid| {
            g.spec.x == density.spec.x && g.spec.y == density.spec.y && g.spec.phi == density.spec.phi
        };
        if !(same(&dx) && same(&dy)) {
            return Err(Error::InvalidGrid("density and gradient grids must share axes".into()));
        }
        if density.kind != GridKind::Density || dx.kind != GridKind::DxDensity || dy.kind != GridKind::DyDensity {
            return Err(Error::InvalidGrid("expected density, dx and dy grids".into()));
        }
        Ok(GridKernel { density, dx, dy })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.density.spec
    }

    /// Trilinear stencil `(indices, weights)`, or `None` outside the box.
    #[inline]
    fn stencil(&self, p: MicroPoint) -> Option<([usize; 8], [f64; 8])> {
        let s = &self.density.spec;
        let loc = |a: &crate::density::Axis, v: f64| {
            let t = (v - a.min) / a.step();
            if !(t >= 0.0 && t <= (a.n - 1) as f64) {
                return None;
            }
            let i = (t as usize).min(a.n - 2);
            Some((i, t - i as f64))
        };
        let (ix, tx) = loc(&s.x, p.x)?;
        let (iy, ty) = loc(&s.y, p.y)?;
        let (ip, tp) = loc(&s.phi, p.phi)?;
        let mut idx = [0usize; 8];
        let mut w = [0.0; 8];
        let mut k = 0;
        for (dp, wp) in [(0, 1.0 - tp), (1, tp)] {
            for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                    idx[k] = s.index(ix + dx, iy + dy, ip + dp);
                    w[k] = wx * wy * wp;
                    k += 1;
                }
            }
        }
        Some((idx, w))
    }

    /// `(du/dx, du/dy)`, zero outside the tabulated box.
    #[inline]
    pub fn gradient_or_zero(&self, p: MicroPoint) -> (f64, f64) {
        match self.stencil(p) {
            None => (0.0, 0.0),
            Some((idx, w)) => {
                let (mut gx, mut gy) = (0.0, 0.0);
                for k in 0..8 {
                    gx += w[k] * self.dx.values[idx[k]];
                    gy += w[k] * self.dy.values[idx[k]];
                }
                (gx, gy)
            }
        }
    }
}

impl KernelSource for GridKernel {
    fn values(&self, p: MicroPoint) -> Result<KernelValues> {
        Ok(KernelValues {
            value: self.density.eval(p)?,
            dx: self.dx.eval(p)?,
            dy: self.dy.eval(p)?,
        })
    }
}

/// `-C(tau phi) phi^4 dx - S(tau phi) phi^3 dy` from precomputed derivatives.
#[inline]
pub fn error_term_from(tau: f64, phi: f64, dx: f64, dy: f64) -> f64 {
    let p2 = phi * phi;
    -c_remainder(tau * phi) * p2 * p2 * dx - s_remainder(tau * phi) * p2 * phi * dy
}

/// Rescaled error term `tau^8 E_{tau^2}(0, P_{tau,0}(p))`.
pub fn error_term<K: KernelSource + ?Sized>(tau: f64, p: MicroPoint, kernel: &K) -> Result<f64> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::InvalidInput(format!("tau must be >= 0, got {tau}")));
    }
    let v = kernel.values(p)?;
    Ok(error_term_from(tau, p.phi, v.dx, v.dy))
}

/// Riemann sum of the rescaled error term over the gradient grids.
pub fn error_term_integral(tau: f64, grids: &GridKernel) -> f64 {
    let s = grids.spec();
    let mut acc = 0.0;
    for ip in 0..s.phi.n {
        let phi = s.phi.node(ip);
        let p2 = phi * phi;
        let (cx, cy) = (-c_remainder(tau * phi) * p2 * p2, -s_remainder(tau * phi) * p2 * phi);
        for iy in 0..s.y.n {
            let base = s.index(0, iy, ip);
            let sx: f64 = grids.dx.values[base..base + s.x.n].iter().sum();
            let sy: f64 = grids.dy.values[base..base + s.x.n].iter().sum();
            acc += cx * sx + cy * sy;
        }
    }
    acc * s.cell_volume()
}

/// Approximate kernel `u_tilde_t(0, p) = t^{-4} u_check(P^{-1}_{sqrt t, 0}(p))`.
pub fn approx_kernel<K: KernelSource + ?Sized>(kernel: &K, t: f64, p: Point) -> Result<f64> {
    let pc = from_macro(t.sqrt(), Point::ORIGIN, p)?;
    let t2 = t * t;
    Ok(kernel.values(pc)?.value / (t2 * t2))
}

/// `tau^8 (-d/dt + L*) u_tilde` at `P_{tau,0}(p)` by fourth-order central
/// differences, with `L* = -cos(phi) d/dx - sin(phi) d/dy + 1/2 d^2/dphi^2`.
///
/// Steps are `eps` times the natural scale of each coordinate at time `t`.
pub fn residual_by_differences<K: KernelSource + ?Sized>(
    kernel: &K,
    tau: f64,
    p: MicroPoint,
    eps: f64,
) -> Result<f64> {
    let t = tau * tau;
    let q = crate::scaling::to_macro(tau, Point::ORIGIN, p);
    let f = |dt: f64, dx: f64, dy: f64, dp: f64| {
        approx_kernel(kernel, t + dt, Point::new(q.x + dx, q.y + dy, q.phi + dp))
    };
    let d1 = |g: &dyn Fn(f64) -> Result<f64>, h: f64| -> Result<f64> {
        Ok((g(-2.0 * h)? - 8.0 * g(-h)? + 8.0 * g(h)? - g(2.0 * h)?) / (12.0 * h))
    };
    let ht = eps * t * t;
    let hx = eps * t * t;
    let hy = eps * t * tau;
    let hp = eps * tau;
    let du_dt = d1(&|h| f(h, 0.0, 0.0, 0.0), ht)?;
    let du_dx = d1(&|h| f(0.0, h, 0.0, 0.0), hx)?;
    let du_dy = d1(&|h| f(0.0, 0.0, h, 0.0), hy)?;
    let d2p = (-f(0.0, 0.0, 0.0, -2.0 * hp)? + 16.0 * f(0.0, 0.0, 0.0, -hp)? - 30.0 * f(0.0, 0.0, 0.0, 0.0)?
        + 16.0 * f(0.0, 0.0, 0.0, hp)?
        - f(0.0, 0.0, 0.0, 2.0 * hp)?)
        / (12.0 * hp * hp);
    let e = -du_dt - q.phi.cos() * du_dx - q.phi.sin() * du_dy + 0.5 * d2p;
    let t2 = t * t;
    Ok(t2 * t2 * e)
}

/// Gauss-Legendre nodes and weights on `[a, b]`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w));
    }
    out.reverse();
    out
}

/// Quadrature controls for [`first_correction`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrectionQuadrature {
    /// Gauss-Legendre nodes on `[0, 1/sqrt 2]` for each half of the time integral.
    pub sigma_nodes: usize,
    /// Block sizes used to coarsen the density grid into integration cells.
    pub inner_factors: (usize, usize, usize),
    /// Cells carrying less mass than this are dropped.
    pub mass_floor: f64,
    /// Also run a coarser quadrature and report the difference.
    pub estimate_error: bool,
    pub tolerance: f64,
}

impl Default for CorrectionQuadrature {
    fn default() -> Self {
        CorrectionQuadrature {
            sigma_nodes: 8,
            inner_factors: (16, 2, 2),
            mass_floor: 1e-10,
            estimate_error: false,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrectionReport {
    pub tau: f64,
    pub sigma_nodes: usize,
    pub inner_cells: usize,
    /// Max difference to the coarser quadrature, relative to the max value.
    pub achieved_estimate: Option<f64>,
    pub tolerance: f64,
    pub tolerance_met: Option<bool>,
}

/// `tau^8 (E * u_tilde)_{tau^2}(0, P_{tau,0}(p))` tabulated over `p`.
#[derive(Debug, Clone)]
pub struct CorrectionGrid {
    pub tau: f64,
    pub grid: DensityGrid,
    pub report: CorrectionReport,
}

impl CorrectionGrid {
    /// Sup norm of the unscaled correction `(E * u_tilde)_t` on the grid.
    pub fn macro_sup_norm(&self) -> f64 {
        let t4 = self.tau.powi(8);
        self.grid.max_abs() / t4
    }
}

/// Point mass of `u_check` over one coarse cell.
#[derive(Debug, Clone, Copy)]
struct Cell {
    mass: f64,
    at: MicroPoint,
}

fn mass_cells(density: &DensityGrid, factors: (usize, usize, usize), floor: f64) -> Result<Vec<Cell>> {
    let (fx, fy, fp) = factors;
    let coarse = density.spec.coarsen(fx, fy, fp)?;
    let n = coarse.len();
    let mut m = vec![0.0; n];
    let mut cx = vec![0.0; n];
    let mut cy = vec![0.0; n];
    let mut cp = vec![0.0; n];
    let s = &density.spec;
    let dv = s.cell_volume();
    for ip in 0..s.phi.n {
        let phi = s.phi.node(ip);
        for iy in 0..s.y.n {
            let y = s.y.node(iy);
            for ix in 0..s.x.n {
                let v = density.get(ix, iy, ip).max(0.0) * dv;
                if v == 0.0 {
                    continue;
                }
                let k = coarse.index(ix / fx, iy / fy, ip / fp);
                m[k] += v;
                cx[k] += v * s.x.node(ix);
                cy[k] += v * y;
                cp[k] += v * phi;
            }
        }
    }
    Ok((0..n)
        .filter(|&k| m[k] > floor)
        .map(|k| Cell {
            mass: m[k],
            at: MicroPoint::new(cx[k] / m[k], cy[k] / m[k], cp[k] / m[k]),
        })
        .collect())
}

#[inline]
fn dil(s: f64, v: MicroPoint) -> MicroPoint {
    let s2 = s * s;
    MicroPoint::new(s2 * s2 * v.x, s2 * s * v.y, s * v.phi)
}

/// Per-cell data for the half where the error term carries the short time.
#[derive(Debug, Clone, Copy)]
struct NearCell {
    /// Entries `m11, m12, m21, m22` of `m_check(theta tau, -sigma phi_* / theta)`.
    m: [f64; 4],
    /// First two entries of the matching `x_check`.
    xv: [f64; 2],
    /// `T_{sigma/theta} p_*`.
    shifted: MicroPoint,
    /// Mass times the coefficients of `du/dx(q)` and `du/dy(q)` after the
    /// integration by parts.
    wx: f64,
    wy: f64,
}

/// Per-cell data for the half where `u_tilde` carries the short time.
#[derive(Debug, Clone, Copy)]
struct FarCell {
    /// `T_{sigma/theta} p_*` where `p_*` is the preimage of the cell point.
    shifted: MicroPoint,
    mass: f64,
}

struct SigmaNode {
    sigma: f64,
    theta: f64,
    /// `2 w sigma theta^{-8}`.
    weight: f64,
    near: Vec<NearCell>,
    far: Vec<FarCell>,
}

fn build_sigma_node(tau: f64, sigma: f64, w: f64, cells: &[Cell]) -> SigmaNode {
    let theta = (1.0 - sigma * sigma).sqrt();
    let r = sigma / theta;
    let (r3, r4) = (r * r * r, r * r * r * r);
    let near = cells
        .iter()
        .map(|c| {
            let phi = c.at.phi;
            let s_arg = -sigma * phi / theta;
            let m = m_check(theta * tau, s_arg);
            let xv = x_check(theta * tau, s_arg);
            let p2 = phi * phi;
            let cc = c_remainder(sigma * tau * phi) * p2 * p2;
            let ss = s_remainder(sigma * tau * phi) * p2 * phi;
            // d/dx_* u(q) = -r^4 (m11 du/dx + m21 du/dy), d/dy_* u(q) = -r^3 (m12 du/dx + m22 du/dy)
            let wx = -c.mass * (cc * r4 * m[(0, 0)] + ss * r3 * m[(0, 1)]);
            let wy = -c.mass * (cc * r4 * m[(1, 0)] + ss * r3 * m[(1, 1)]);
            NearCell {
                m: [m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]],
                xv: [xv[0], xv[1]],
                shifted: dil(r, c.at),
                wx,
                wy,
            }
        })
        .collect();
    let ts = sigma * tau;
    let far = cells
        .iter()
        .map(|c| {
            // c = x_check(ts, -phi_*) - m_check(ts, -phi_*) p_*, with phi_* = -c.phi
            let phi_s = -c.at.phi;
            let m = m_check(ts, -phi_s);
            let xv = x_check(ts, -phi_s);
            let (bx, by) = (xv[0] - c.at.x, xv[1] - c.at.y);
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            let px = (m[(1, 1)] * bx - m[(0, 1)] * by) / det;
            let py = (-m[(1, 0)] * bx + m[(0, 0)] * by) / det;
            FarCell {
                shifted: dil(r, MicroPoint::new(px, py, phi_s)),
                mass: c.mass,
            }
        })
        .collect();
    SigmaNode {
        sigma,
        theta,
        weight: 2.0 * w * sigma / theta.powi(8),
        near,
        far,
    }
}

fn correction_at(tau: f64, p: MicroPoint, nodes: &[SigmaNode], grids: &GridKernel) -> f64 {
    let mut total = 0.0;
    for node in nodes {
        let th = node.theta;
        let base = dil(1.0 / th, p);
        let mut near = 0.0;
        for c in &node.near {
            let v = (base.x - c.shifted.x, base.y - c.shifted.y);
            let q = MicroPoint::new(
                c.m[0] * v.0 + c.m[1] * v.1 + c.xv[0],
                c.m[2] * v.0 + c.m[3] * v.1 + c.xv[1],
                base.phi - c.shifted.phi,
            );
            let (gx, gy) = grids.gradient_or_zero(q);
            near += c.wx * gx + c.wy * gy;
        }
        let s_arg = p.phi / th;
        let m: Matrix3<f64> = m_check(th * tau, s_arg);
        let xv: Vector3<f64> = x_check(th * tau, s_arg);
        let r2 = (node.sigma / th).powi(2);
        let off = (base.x - r2 * xv[0], base.y - r2 * xv[1]);
        let mut far = 0.0;
        for c in &node.far {
            let a = MicroPoint::new(
                off.0 + m[(0, 0)] * c.shifted.x + m[(0, 1)] * c.shifted.y,
                off.1 + m[(1, 0)] * c.shifted.x + m[(1, 1)] * c.shifted.y,
                base.phi + c.shifted.phi,
            );
            let (gx, gy) = grids.gradient_or_zero(a);
            if gx != 0.0 || gy != 0.0 {
                far += c.mass * error_term_from(th * tau, a.phi, gx, gy);
            }
        }
        total += node.weight * (near + far);
    }
    total
}

fn correction_values(
    tau: f64,
    out: &GridSpec,
    grids: &GridKernel,
    sigma_nodes: usize,
    factors: (usize, usize, usize),
    floor: f64,
) -> Result<(Vec<f64>, usize)> {
    let cells = mass_cells(&grids.density, factors, floor)?;
    let nodes: Vec<SigmaNode> = gauss_legendre(sigma_nodes, 0.0, FRAC_1_SQRT_2)
        .into_iter()
        .map(|(s, w)| build_sigma_node(tau, s, w, &cells))
        .collect();
    let tau2 = tau * tau;
    let values = (0..out.len())
        .into_par_iter()
        .map(|k| {
            let ix = k % out.x.n;
            let iy = (k / out.x.n) % out.y.n;
            let ip = k / (out.x.n * out.y.n);
            tau2 * correction_at(tau, out.node(ix, iy, ip), &nodes, grids)
        })
        .collect();
    Ok((values, cells.len()))
}

/// First Duhamel correction on the output grid `out`.
pub fn first_correction(
    tau: f64,
    out: &GridSpec,
    grids: &GridKernel,
    quad: &CorrectionQuadrature,
) -> Result<CorrectionGrid> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidInput(format!("first correction needs 0 < tau <= 1, got {tau}")));
    }
    if quad.sigma_nodes == 0 {
        return Err(Error::InvalidInput("sigma_nodes must be positive".into()));
    }
    out.validate()?;
    let (values, inner_cells) =
        correction_values(tau, out, grids, quad.sigma_nodes, quad.inner_factors, quad.mass_floor)?;
    let achieved_estimate = if quad.estimate_error {
        let (fx, fy, fp) = quad.inner_factors;
        let coarse = (fx * 2, fy * 2, fp * 2);
        let (alt, _) = correction_values(
            tau,
            out,
            grids,
            quad.sigma_nodes.div_ceil(2).max(1),
            coarse,
            quad.mass_floor,
        )?;
        let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let diff = values
            .iter()
            .zip(&alt)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        Some(diff / scale)
    } else {
        None
    };
    let report = CorrectionReport {
        tau,
        sigma_nodes: quad.sigma_nodes,
        inner_cells,
        achieved_estimate,
        tolerance: quad.tolerance,
        tolerance_met: achieved_estimate.map(|e| e <= quad.tolerance),
    };
    if let Some(false) = report.tolerance_met {
        log::warn!(
            "first correction at tau = {tau}: achieved estimate {:.2e} above tolerance {:.2e}",
            achieved_estimate.unwrap_or(f64::NAN),
            quad.tolerance
        );
    }
    Ok(CorrectionGrid {
        tau,
        grid: DensityGrid {
            spec: *out,
            kind: GridKind::Correction,
            values,
        },
        report,
    })
}

/// Default output box for the correction: the bulk of the support.
pub fn default_correction_spec() -> GridSpec {
    use crate::density::Axis;
    GridSpec::with_axes(
        Axis::new(-1.5, 0.1, 32),
        Axis::new(-2.25, 2.25, 16),
        Axis::new(-3.0, 3.0, 16),
    )
}

/// Small-time expansion of the kernel in microscopic coordinates:
/// `t^{-4} u_check(p)` for `k = 0`, plus the first correction for `k = 1`.
pub fn expansion_eval(
    t: f64,
    p: MicroPoint,
    k: usize,
    grids: &GridKernel,
    correction: Option<&CorrectionGrid>,
) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::InvalidInput(format!("t must be positive, got {t}")));
    }
    let t4 = t.powi(4);
    let lead = if crate::density::on_support_closure(p) {
        grids.density.eval(p)?
    } else {
        0.0
    };
    match k {
        0 => Ok(lead / t4),
        1 => {
            let c = correction.ok_or_else(|| Error::InvalidInput("K = 1 needs a correction grid".into()))?;
            if (c.tau * c.tau - t).abs() > 1e-12 * t {
                return Err(Error::InvalidInput(format!(
                    "correction grid is for t = {}, asked for t = {t}",
                    c.tau * c.tau
                )));
            }
            Ok((lead + c.grid.eval(p)?) / t4)
        }
        _ => Err(Error::InvalidInput(format!("only K <= 1 is available, got {k}"))),
    }
}

/// Least-squares slope of `ln(norm)` against `ln(t)`.
pub fn order_fit(values: &[(f64, f64)]) -> Result<f64> {
    if values.len() < 3 {
        return Err(Error::InvalidInput(format!("order fit needs >= 3 points, got {}", values.len())));
    }
    if values.iter().any(|&(t, v)| !(t > 0.0 && v > 0.0 && t.is_finite() && v.is_finite())) {
        return Err(Error::InvalidInput("order fit needs positive finite data".into()));
    }
    let n = values.len() as f64;
    let lx: Vec<f64> = values.iter().map(|v| v.0.ln()).collect();
    let ly: Vec<f64> = values.iter().map(|v| v.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 1e-24 * n {
        return Err(Error::InvalidInput("order fit needs distinct t values".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// Sup norm of the leading term `t^{-4} u_check` in macroscopic units.
pub fn leading_sup_norm(t: f64, density: &DensityGrid) -> f64 {
    density.max_abs() / t.powi(4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{invert_all, Axis, Cutoffs, Outputs};
    use crate::scaling::{to_macro, endpoint_from_macro, frame, dilation};

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let q = gauss_legendre(6, 0.0, 2.0);
        for deg in 0..12 {
            let got: f64 = q.iter().map(|(x, w)| w * x.powi(deg)).sum();
            let want = 2f64.powi(deg + 1) / (deg + 1) as f64;
            assert!((got - want).abs() < 1e-12 * want, "degree {deg}");
        }
        let one = gauss_legendre(1, -1.0, 1.0);
        assert!(one[0].0.abs() < 1e-15 && (one[0].1 - 2.0).abs() < 1e-15);
    }

    #[test]
    fn order_fit_examples() {
        let ts = [0.04f64, 0.09, 0.16, 0.25];
        let d4: Vec<(f64, f64)> = ts.iter().map(|&t| (t, t.powi(-4))).collect();
        assert!((order_fit(&d4).unwrap() + 4.0).abs() < 1e-12);
        let d3: Vec<(f64, f64)> = ts.iter().map(|&t| (t, 2.5 * t.powi(-3))).collect();
        assert!((order_fit(&d3).unwrap() + 3.0).abs() < 1e-12);
        assert!(order_fit(&d3[..2]).is_err());
        assert!(order_fit(&[(0.1, 1.0), (0.1, 2.0), (0.1, 3.0)]).is_err());
        assert!(order_fit(&[(0.1, 1.0), (0.2, -2.0), (0.3, 3.0)]).is_err());
    }

    #[test]
    fn error_term_examples() {
        let k = SpectralKernel::new(2000.0, 0.5).unwrap();
        let p = MicroPoint::new(-0.8, 0.2, 0.0);
        assert_eq!(error_term(0.4, p, &k).unwrap(), 0.0);
        let p = MicroPoint::new(-0.8, 0.2, 0.7);
        let v = k.eval(p);
        let want = -(1.0 / 24.0) * 0.7f64.powi(4) * v.dx + (1.0 / 6.0) * 0.7f64.powi(3) * v.dy;
        assert!((error_term(0.0, p, &k).unwrap() - want).abs() < 1e-15);
    }

    /// The P maps composed directly, against the closed-form micro maps used
    /// in the convolution.
    #[test]
    fn convolution_maps_match_direct_charts() {
        let cases = [
            (0.3, MicroPoint::new(-0.7, 0.4, 0.9), MicroPoint::new(-1.1, -0.3, 1.4), 0.4f64),
            (0.5, MicroPoint::new(-0.2, -0.5, -1.2), MicroPoint::new(-0.4, 0.8, -0.6), 0.65),
            (0.2, MicroPoint::new(-2.0, 1.0, 2.0), MicroPoint::new(-0.1, 0.2, -2.5), 0.1),
        ];
        for (tau, p, ps, sigma) in cases {
            let theta: f64 = (1.0 - sigma * sigma).sqrt();
            let t = tau * tau;
            let pm = to_macro(tau, Point::ORIGIN, p);
            // near half: p_* = P_{sigma tau, 0}(ps), q = P^{-1}_{theta tau, p_*}(p)
            let pstar = to_macro(sigma * tau, Point::ORIGIN, ps);
            let q_direct = from_macro(theta * tau, pstar, pm).unwrap();
            let s_arg = -sigma * ps.phi / theta;
            let v = dil(1.0 / theta, p).to_vector() - dil(sigma / theta, ps).to_vector();
            let q_formula = m_check(theta * tau, s_arg) * v + x_check(theta * tau, s_arg);
            assert!((q_direct.to_vector() - q_formula).norm() < 1e-9, "{q_direct:?} {q_formula}");
            // far half: p_* = P_{-sigma tau, p}(ps), p_A = P^{-1}_{theta tau, 0}(p_*)
            let xp = frame(pm).matrix().column(0).into_owned();
            let pstar = pm.to_vector() - (sigma * tau).powi(2) * xp
                + frame(pm).matrix() * dilation(sigma * tau) * ps.to_vector();
            let pa_direct = from_macro(theta * tau, Point::ORIGIN, Point::from_vector(pstar)).unwrap();
            let r = sigma / theta;
            let s_arg = p.phi / theta;
            let pa_formula = dil(1.0 / theta, p).to_vector()
                + m_check(theta * tau, s_arg) * dil(r, ps).to_vector()
                - r * r * x_check(theta * tau, s_arg);
            assert!((pa_direct.to_vector() - pa_formula).norm() < 1e-9);
            // endpoint chart: u_tilde_s(p_*, p) has argument x_check(ts, -phi_*) - m_check(ts, -phi_*) ps
            let ts = sigma * tau;
            let arg_direct = from_macro(ts, Point::from_vector(pstar), pm).unwrap();
            let arg_formula = x_check(ts, -ps.phi) - m_check(ts, -ps.phi) * ps.to_vector();
            assert!((arg_direct.to_vector() - arg_formula).norm() < 1e-9);
            let _ = (t, endpoint_from_macro);
        }
    }

    fn small_grids() -> GridKernel {
        let spec = GridSpec {
            x: Axis::new(-4.5, 0.5, 512),
            y: Axis::new(-4.5, 4.5, 64),
            phi: Axis::new(-4.5, 4.5, 64),
            cutoffs: Cutoffs {
                lambda: 1500.0,
                mu: 64.0,
                nu: 64.0,
            },
            tolerance: 1.0,
            ..GridSpec::default()
        };
        let set = invert_all(
            &spec,
            Outputs {
                density: true,
                dx: true,
                dy: true,
            },
        )
        .unwrap();
        GridKernel::new(set.density, set.dx.unwrap(), set.dy.unwrap()).unwrap()
    }

    #[test]
    fn correction_properties_on_small_grids() {
        let grids = small_grids();
        let out = GridSpec::with_axes(
            Axis::new(-3.0, 0.25, 8),
            Axis::new(-2.0, 2.0, 8),
            Axis::new(-3.0, 3.0, 8),
        );
        let quad = CorrectionQuadrature {
            sigma_nodes: 6,
            inner_factors: (16, 4, 4),
            ..CorrectionQuadrature::default()
        };
        let c = first_correction(0.3, &out, &grids, &quad).unwrap();
        assert!(c.grid.values.iter().all(|v| v.is_finite()));
        let max = c.grid.max_abs();
        assert!(max > 0.0);
        for ix in 0..8 {
            for iy in 0..8 {
                for ip in 0..8 {
                    let a = c.grid.get(ix, iy, ip);
                    let b = c.grid.get(ix, 7 - iy, 7 - ip);
                    assert!((a - b).abs() <= 1e-9 * max, "asymmetry at {ix},{iy},{ip}");
                }
            }
        }
        assert!(first_correction(1.5, &out, &grids, &quad).is_err());
        let e0 = error_term_integral(0.3, &grids);
        assert!(e0.abs() < 1e-3, "error term integral {e0}");
    }

    #[test]
    fn expansion_examples() {
        let grids = small_grids();
        let outside = MicroPoint::new(0.2, 0.0, 0.0);
        assert_eq!(expansion_eval(0.01, outside, 0, &grids, None).unwrap(), 0.0);
        let p = MicroPoint::new(-0.6, 0.1, 0.3);
        let a = expansion_eval(0.02, p, 0, &grids, None).unwrap();
        let b = expansion_eval(0.01, p, 0, &grids, None).unwrap();
        assert_eq!(b, 16.0 * a);
        assert!(expansion_eval(0.01, p, 1, &grids, None).is_err());
        assert!(expansion_eval(0.01, p, 2, &grids, None).is_err());
    }

    #[test]
    fn error_term_matches_finite_differences() {
        let k = SpectralKernel::new(20000.0, 0.5).unwrap();
        let p = MicroPoint::new(-0.5, 0.3, 0.8);
        let tau = 0.3;
        let closed = error_term(tau, p, &k).unwrap();
        let fd = residual_by_differences(&k, tau, p, 3e-4).unwrap();
        assert!((closed - fd).abs() <= 5e-3 * closed.abs(), "{closed} vs {fd}");
    }
}

