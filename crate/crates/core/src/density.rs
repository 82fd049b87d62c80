//! Tabulation of the limit density `u_check` and its spatial derivatives.
//!
//! For each `lambda` the characteristic function is a complex Gaussian in
//! `(mu, nu)`, so the inner two Fourier integrals are done in closed form and
//! only the `lambda` integral is discretized:
//!
//! ```text
//! u(x, y, phi) = 1/pi Re int_0^inf e^{-i lambda x} A(lambda) G_lambda(y, phi) d lambda
//! G_lambda(z) = exp(-z^T Q^{-1} z / 2) / (2 pi sqrt(det Q))
//! ```
//!
//! The trapezoid rule in `lambda` on a uniform grid is spectrally accurate
//! here (the integrand extends to an analytic function on the whole line) and
//! periodizes in `x` with period `2 pi / h`.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::charfn::{closed_form, FreqPoint, QuadCoeffs};
use crate::error::{Error, Result};
use crate::scaling::MicroPoint;
use crate::special::Complex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridAxis {
    X,
    Y,
    Phi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, n: usize) -> Self {
        Axis { min, max, n }
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.n - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.max
        } else {
            self.min + i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }

    fn validate(&self, axis: GridAxis) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min < self.max) {
            return Err(Error::InvalidGrid(format!(
                "{axis:?} axis needs finite min < max, got [{}, {}]",
                self.min, self.max
            )));
        }
        if self.n < 8 || !self.n.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "{axis:?} axis needs a power-of-two node count >= 8, got {}",
                self.n
            )));
        }
        Ok(())
    }

    /// Block-averaged axis: node `i` is the centre of fine nodes `f i .. f i + f - 1`.
    fn coarsen(&self, f: usize) -> Axis {
        let h = self.step();
        let min = self.min + 0.5 * (f - 1) as f64 * h;
        let n = self.n / f;
        Axis::new(min, min + (n - 1) as f64 * f as f64 * h, n)
    }
}

/// Frequency box `[-lambda, lambda] x [-mu, mu] x [-nu, nu]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoffs {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x: Axis,
    pub y: Axis,
    pub phi: Axis,
    pub cutoffs: Cutoffs,
    /// Quadrature step per frequency axis. The `mu`/`nu` steps are used only
    /// by the direct triple-sum route.
    pub steps: Cutoffs,
    pub tolerance: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            x: Axis::new(-4.5, 0.5, 2048),
            y: Axis::new(-4.5, 4.5, 128),
            phi: Axis::new(-4.5, 4.5, 128),
            cutoffs: Cutoffs {
                lambda: 6000.0,
                mu: 64.0,
                nu: 64.0,
            },
            steps: Cutoffs {
                lambda: 0.5,
                mu: 0.25,
                nu: 0.25,
            },
            tolerance: 1e-3,
        }
    }
}

impl GridSpec {
    pub fn with_axes(x: Axis, y: Axis, phi: Axis) -> Self {
        GridSpec {
            x,
            y,
            phi,
            ..GridSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.x.validate(GridAxis::X)?;
        self.y.validate(GridAxis::Y)?;
        self.phi.validate(GridAxis::Phi)?;
        for (name, v) in [
            ("lambda cutoff", self.cutoffs.lambda),
            ("mu cutoff", self.cutoffs.mu),
            ("nu cutoff", self.cutoffs.nu),
            ("lambda step", self.steps.lambda),
            ("mu step", self.steps.mu),
            ("nu step", self.steps.nu),
            ("tolerance", self.tolerance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidGrid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.n * self.y.n * self.phi.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.x.step() * self.y.step() * self.phi.step()
    }

    /// Storage index; `x` varies fastest in memory. Files are written in
    /// row-major `(x, y, phi)` order regardless.
    pub fn index(&self, ix: usize, iy: usize, ip: usize) -> usize {
        (ip * self.y.n + iy) * self.x.n + ix
    }

    pub fn node(&self, ix: usize, iy: usize, ip: usize) -> MicroPoint {
        MicroPoint::new(self.x.node(ix), self.y.node(iy), self.phi.node(ip))
    }

    pub fn axis(&self, a: GridAxis) -> &Axis {
        match a {
            GridAxis::X => &self.x,
            GridAxis::Y => &self.y,
            GridAxis::Phi => &self.phi,
        }
    }

    pub fn coarsen(&self, fx: usize, fy: usize, fp: usize) -> Result<GridSpec> {
        for (a, f) in [(GridAxis::X, fx), (GridAxis::Y, fy), (GridAxis::Phi, fp)] {
            let n = self.axis(a).n;
            if f == 0 || n % f != 0 || n / f < 2 {
                return Err(Error::InvalidGrid(format!(
                    "cannot coarsen {a:?} axis of {n} nodes by {f}"
                )));
            }
        }
        Ok(GridSpec {
            x: self.x.coarsen(fx),
            y: self.y.coarsen(fy),
            phi: self.phi.coarsen(fp),
            ..*self
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Density,
    DxDensity,
    DyDensity,
    Correction,
}

impl GridKind {
    pub fn tag(self) -> u8 {
        match self {
            GridKind::Density => 0,
            GridKind::DxDensity => 1,
            GridKind::DyDensity => 2,
            GridKind::Correction => 3,
        }
    }

    pub fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            0 => GridKind::Density,
            1 => GridKind::DxDensity,
            2 => GridKind::DyDensity,
            3 => GridKind::Correction,
            _ => return Err(Error::Format(format!("unknown grid kind tag {t}"))),
        })
    }
}

/// Values are stored with `x` fastest, see [`GridSpec::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub spec: GridSpec,
    pub kind: GridKind,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResolutionReport {
    /// Bound on the pointwise error from truncating the `lambda` integral.
    pub lambda_tail: f64,
    /// Riemann-sum aliasing of the total mass from the `x` node spacing.
    pub x_alias: f64,
    /// Wrap-around from periodization of the `lambda` quadrature.
    pub periodization: f64,
}

impl ResolutionReport {
    pub fn estimate(&self) -> f64 {
        self.lambda_tail + self.x_alias + self.periodization
    }
}

/// Decay rate of `|A(lambda)| ~ sqrt 2 exp(-kappa sqrt lambda)`.
const KAPPA: f64 = 0.353_553_390_593_273_8;

pub fn resolution_report(spec: &GridSpec) -> ResolutionReport {
    let lam = spec.cutoffs.lambda;
    let g = SpectralNode::new(lam, 1.0).coef.norm();
    let tail = g / PI * (2.0 * lam.sqrt() / KAPPA + 8.0 / (KAPPA * KAPPA));
    let alias_freq = 2.0 * PI / spec.x.step();
    let (my, mp) = (2.0 * PI / spec.y.step(), 2.0 * PI / spec.phi.step());
    let mut alias = 0.0;
    let mut j = 1;
    while j as f64 * alias_freq <= lam {
        let c = QuadCoeffs::new(j as f64 * alias_freq);
        for k in -20i32..=20 {
            for l in -20i32..=20 {
                alias += 2.0 * c.eval(k as f64 * my, l as f64 * mp).norm();
            }
        }
        j += 1;
    }
    let gap = 2.0 * PI / spec.steps.lambda - (spec.x.max - spec.x.min);
    let periodization = if gap > 0.0 {
        3.0 * (-PI * PI * gap / 4.0).exp()
    } else {
        f64::INFINITY
    };
    ResolutionReport {
        lambda_tail: tail,
        x_alias: alias,
        periodization,
    }
}

fn check_resolution(spec: &GridSpec) -> Result<ResolutionReport> {
    spec.validate()?;
    let rep = resolution_report(spec);
    if rep.estimate() > spec.tolerance {
        return Err(Error::Resolution {
            detail: format!(
                "lambda tail {:.2e}, x aliasing {:.2e}, periodization {:.2e}",
                rep.lambda_tail, rep.x_alias, rep.periodization
            ),
            estimate: rep.estimate(),
            tolerance: spec.tolerance,
        });
    }
    Ok(rep)
}

/// One quadrature node of the `lambda` integral with the `(mu, nu)` Gaussian
/// already integrated out.
#[derive(Debug, Clone, Copy)]
struct SpectralNode {
    lambda: f64,
    /// `weight * A / (2 pi sqrt det Q)`, weight including the `1/pi` and trapezoid factors.
    coef: Complex,
    /// Entries of `Q^{-1}`: (yy, y phi, phi phi).
    inv: [Complex; 3],
}

impl SpectralNode {
    fn new(lambda: f64, weight: f64) -> Self {
        let c = QuadCoeffs::new(lambda);
        let q = c.q_matrix();
        let det = q[0][0] * q[1][1] - q[0][1] * q[0][1];
        let half_tr = 0.5 * (q[0][0] + q[1][1]);
        let disc = (half_tr * half_tr - det).sqrt();
        let (e1, e2) = {
            let (p, m) = (half_tr + disc, half_tr - disc);
            let big = if p.norm() >= m.norm() { p } else { m };
            (big, det / big)
        };
        let sqrt_det = e1.sqrt() * e2.sqrt();
        let coef = weight / PI * c.log_amp.exp() / (2.0 * PI * sqrt_det);
        SpectralNode {
            lambda,
            coef,
            inv: [q[1][1] / det, -q[0][1] / det, q[0][0] / det],
        }
    }

    /// `-z^T Q^{-1} z / 2`.
    #[inline]
    fn exponent(&self, y: f64, phi: f64) -> Complex {
        -0.5 * (self.inv[0] * y * y + 2.0 * self.inv[1] * y * phi + self.inv[2] * phi * phi)
    }

    /// `-(Q^{-1} z)_y`, the factor produced by a `y` derivative.
    #[inline]
    fn dy_factor(&self, y: f64, phi: f64) -> Complex {
        -(self.inv[0] * y + self.inv[1] * phi)
    }

    fn log_scale(&self) -> f64 {
        self.coef.norm().ln()
    }
}

/// Precomputed `lambda` quadrature for pointwise evaluation of the density and
/// its `x`/`y` derivatives.
#[derive(Debug, Clone)]
pub struct SpectralKernel {
    nodes: Vec<SpectralNode>,
    skip_below: f64,
}

/// Values of `(u, du/dx, du/dy)` at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KernelValues {
    pub value: f64,
    pub dx: f64,
    pub dy: f64,
}

impl SpectralKernel {
    pub fn new(cutoff: f64, step: f64) -> Result<Self> {
        if !(cutoff > 0.0 && step > 0.0 && cutoff.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "spectral kernel needs positive cutoff and step, got {cutoff}, {step}"
            )));
        }
        let k = (cutoff / step).round() as usize;
        let nodes = (0..=k)
            .map(|i| {
                let w = if i == 0 || i == k { 0.5 * step } else { step };
                SpectralNode::new(i as f64 * step, w)
            })
            .collect();
        Ok(SpectralKernel {
            nodes,
            skip_below: 1e-17,
        })
    }

    pub fn from_spec(spec: &GridSpec) -> Result<Self> {
        Self::new(spec.cutoffs.lambda, spec.steps.lambda)
    }

    pub fn cutoff(&self) -> f64 {
        self.nodes.last().map_or(0.0, |n| n.lambda)
    }

    pub fn eval(&self, p: MicroPoint) -> KernelValues {
        let log_skip = self.skip_below.ln();
        let mut out = KernelValues::default();
        for node in &self.nodes {
            let e = node.exponent(p.y, p.phi);
            if node.log_scale() + e.re < log_skip {
                continue;
            }
            let ph = Complex::from_polar(1.0, -node.lambda * p.x);
            let c = node.coef * e.exp() * ph;
            out.value += c.re;
            out.dx += (Complex::new(0.0, -node.lambda) * c).re;
            out.dy += (node.dy_factor(p.y, p.phi) * c).re;
        }
        out
    }

    pub fn density(&self, p: MicroPoint) -> f64 {
        self.eval(p).value
    }
}

/// Direct discretization of the full triple Fourier integral by the
/// trapezoid rule on `[-L, L] x [-M, M] x [-N, N]`.
pub fn invert_direct(p: MicroPoint, cutoffs: Cutoffs, steps: Cutoffs) -> f64 {
    let grid = |cut: f64, h: f64| {
        let k = (cut / h).round() as i64;
        (-k..=k)
            .map(move |i| {
                let w = if i.abs() == k { 0.5 * h } else { h };
                (i as f64 * h, w)
            })
            .collect::<Vec<_>>()
    };
    let (ls, ms, ns) = (
        grid(cutoffs.lambda, steps.lambda),
        grid(cutoffs.mu, steps.mu),
        grid(cutoffs.nu, steps.nu),
    );
    let mut acc = 0.0;
    for &(l, wl) in &ls {
        for &(m, wm) in &ms {
            for &(n, wn) in &ns {
                let phase = Complex::from_polar(1.0, -(l * p.x + m * p.y + n * p.phi));
                acc += wl * wm * wn * (phase * closed_form(FreqPoint::new(l, m, n))).re;
            }
        }
    }
    acc / (8.0 * PI * PI * PI)
}

/// Density and derivative grids from one pass over the `lambda` nodes.
#[derive(Debug, Clone)]
pub struct GridSet {
    pub density: DensityGrid,
    pub dx: Option<DensityGrid>,
    pub dy: Option<DensityGrid>,
    pub report: ResolutionReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outputs {
    pub density: bool,
    pub dx: bool,
    pub dy: bool,
}

const LAMBDA_BLOCK: usize = 64;
/// Contributions smaller than this (absolute, per node and lambda) are skipped.
const GRID_SKIP: f64 = 1e-16;

fn tabulate(spec: &GridSpec, outputs: Outputs) -> Result<(Vec<Vec<f64>>, ResolutionReport)> {
    let report = check_resolution(spec)?;
    let kernel = SpectralKernel::from_spec(spec)?;
    let (nx, ny, np) = (spec.x.n, spec.y.n, spec.phi.n);
    let xs = spec.x.nodes();
    let ys = spec.y.nodes();
    let ps = spec.phi.nodes();
    let (hy, y0) = (spec.y.step(), spec.y.min);
    let channels: Vec<usize> = [outputs.density, outputs.dx, outputs.dy]
        .iter()
        .enumerate()
        .filter_map(|(i, &on)| on.then_some(i))
        .collect();
    let nc = channels.len();
    let plane = ny * nx;
    // per phi row and channel, a contiguous (y, x) plane in the grid's own layout
    let mut rows: Vec<Vec<Vec<f64>>> = (0..np).map(|_| vec![vec![0.0; plane]; nc]).collect();
    let log_skip = GRID_SKIP.ln();

    let mut phase_re = vec![0.0; LAMBDA_BLOCK * nx];
    let mut phase_im = vec![0.0; LAMBDA_BLOCK * nx];
    for block in kernel.nodes.chunks(LAMBDA_BLOCK) {
        for (b, node) in block.iter().enumerate() {
            for (ix, &x) in xs.iter().enumerate() {
                let (s, c) = (-node.lambda * x).sin_cos();
                phase_re[b * nx + ix] = c;
                phase_im[b * nx + ix] = s;
            }
        }
        rows.par_iter_mut().enumerate().for_each(|(ip, row)| {
            let phi = ps[ip];
            for (b, node) in block.iter().enumerate() {
                let budget = log_skip - node.log_scale();
                // keep y with -(P y^2 + 2 R y phi + S phi^2)/2 >= budget
                let (pp, rr, ss) = (node.inv[0].re, node.inv[1].re, node.inv[2].re);
                let disc = rr * rr * phi * phi - pp * (ss * phi * phi + 2.0 * budget);
                if disc < 0.0 {
                    continue;
                }
                let root = disc.sqrt();
                let (lo, hi) = ((-rr * phi - root) / pp, (-rr * phi + root) / pp);
                let i_lo = ((lo - y0) / hy).ceil().max(0.0) as usize;
                let i_hi = ((hi - y0) / hy).floor();
                if i_hi < 0.0 {
                    continue;
                }
                let i_hi = (i_hi as usize).min(ny - 1);
                let pre = &phase_re[b * nx..(b + 1) * nx];
                let pim = &phase_im[b * nx..(b + 1) * nx];
                for iy in i_lo..=i_hi {
                    let y = ys[iy];
                    let g = node.coef * node.exponent(y, phi).exp();
                    for (slot, &ch) in channels.iter().enumerate() {
                        let c = match ch {
                            0 => g,
                            1 => Complex::new(0.0, -node.lambda) * g,
                            _ => node.dy_factor(y, phi) * g,
                        };
                        let acc = &mut row[slot][iy * nx..(iy + 1) * nx];
                        for ix in 0..nx {
                            acc[ix] += c.re * pre[ix] - c.im * pim[ix];
                        }
                    }
                }
            }
        });
    }

    let mut out: Vec<Vec<f64>> = Vec::with_capacity(nc);
    for slot in 0..nc {
        let mut grid = Vec::with_capacity(spec.len());
        for row in rows.iter_mut() {
            grid.extend_from_slice(&std::mem::take(&mut row[slot]));
        }
        out.push(grid);
    }
    Ok((out, report))
}

fn warn_ringing(grid: &DensityGrid) {
    let min = grid.values.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-6 {
        warn!("density grid has negative ringing down to {min:.3e} (tolerated -1e-6)");
    }
}

pub fn invert_all(spec: &GridSpec, outputs: Outputs) -> Result<GridSet> {
    let wanted = Outputs {
        density: true,
        ..outputs
    };
    let (mut grids, report) = tabulate(spec, wanted)?;
    let mut take = |on: bool, kind: GridKind| {
        on.then(|| DensityGrid {
            spec: *spec,
            kind,
            values: grids.remove(0),
        })
    };
    let density = take(true, GridKind::Density).expect("density channel");
    let dx = take(outputs.dx, GridKind::DxDensity);
    let dy = take(outputs.dy, GridKind::DyDensity);
    warn_ringing(&density);
    Ok(GridSet {
        density,
        dx,
        dy,
        report,
    })
}

pub fn invert(spec: &GridSpec) -> Result<DensityGrid> {
    let set = invert_all(
        spec,
        Outputs {
            density: true,
            dx: false,
            dy: false,
        },
    )?;
    Ok(set.density)
}

pub fn gradient(spec: &GridSpec, axis: GridAxis) -> Result<DensityGrid> {
    let outputs = Outputs {
        density: false,
        dx: axis == GridAxis::X,
        dy: axis == GridAxis::Y,
    };
    if axis == GridAxis::Phi {
        return Err(Error::InvalidInput("gradient is available along x and y only".into()));
    }
    let (mut grids, _) = tabulate(spec, outputs)?;
    Ok(DensityGrid {
        spec: *spec,
        kind: if axis == GridAxis::X {
            GridKind::DxDensity
        } else {
            GridKind::DyDensity
        },
        values: grids.remove(0),
    })
}

pub fn in_support(p: MicroPoint) -> bool {
    p.y * p.y < -2.0 * p.x
}

pub fn on_support_closure(p: MicroPoint) -> bool {
    p.y * p.y <= -2.0 * p.x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSummary {
    pub mass: f64,
    pub xc_mean: f64,
    pub yc_var: f64,
    pub yc_phic_cov: f64,
    pub phic_var: f64,
    /// Largest value at nodes with `y^2 >= -2x + 0.2`.
    pub support_violation: f64,
    /// Sup-norm distance of the `phi` marginal to the standard normal density.
    pub phi_marginal_error: f64,
    pub min_value: f64,
    /// Largest `|value|` at nodes with `|p| >= 5`.
    pub decay_outside_5: f64,
    /// Largest `|value|` at nodes with `|p| >= 6`.
    pub decay_outside_6: f64,
}

impl DensityGrid {
    pub fn zeros(spec: GridSpec, kind: GridKind) -> Self {
        DensityGrid {
            spec,
            kind,
            values: vec![0.0; spec.len()],
        }
    }

    pub fn get(&self, ix: usize, iy: usize, ip: usize) -> f64 {
        self.values[self.spec.index(ix, iy, ip)]
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.spec.cell_volume()
    }

    fn locate(&self, axis: GridAxis, v: f64) -> Result<(usize, f64)> {
        let a = self.spec.axis(axis);
        if !(v >= a.min && v <= a.max) {
            return Err(Error::OutOfBounds {
                axis,
                value: v,
                min: a.min,
                max: a.max,
            });
        }
        let t = (v - a.min) / a.step();
        let i = (t.floor() as usize).min(a.n - 2);
        Ok((i, t - i as f64))
    }

    /// Trilinear interpolation.
    pub fn eval(&self, p: MicroPoint) -> Result<f64> {
        let (ix, tx) = self.locate(GridAxis::X, p.x)?;
        let (iy, ty) = self.locate(GridAxis::Y, p.y)?;
        let (ip, tp) = self.locate(GridAxis::Phi, p.phi)?;
        let mut acc = 0.0;
        for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
            for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                for (dp, wp) in [(0, 1.0 - tp), (1, tp)] {
                    let w = wx * wy * wp;
                    if w != 0.0 {
                        acc += w * self.get(ix + dx, iy + dy, ip + dp);
                    }
                }
            }
        }
        Ok(acc)
    }

    pub fn summary(&self) -> GridSummary {
        let s = &self.spec;
        let dv = s.cell_volume();
        let (xs, ys, ps) = (s.x.nodes(), s.y.nodes(), s.phi.nodes());
        let (mut m0, mut mx, mut my, mut mp) = (0.0, 0.0, 0.0, 0.0);
        let (mut myy, mut myp, mut mpp) = (0.0, 0.0, 0.0);
        let mut violation = 0.0f64;
        let mut decay = 0.0f64;
        let mut decay5 = 0.0f64;
        let mut min_value = f64::INFINITY;
        let mut phi_marginal = vec![0.0; s.phi.n];
        for (ip, &p) in ps.iter().enumerate() {
            for (iy, &y) in ys.iter().enumerate() {
                for (ix, &x) in xs.iter().enumerate() {
                    let v = self.get(ix, iy, ip);
                    m0 += v;
                    mx += v * x;
                    my += v * y;
                    mp += v * p;
                    myy += v * y * y;
                    myp += v * y * p;
                    mpp += v * p * p;
                    phi_marginal[ip] += v;
                    min_value = min_value.min(v);
                    if y * y >= -2.0 * x + 0.2 {
                        violation = violation.max(v);
                    }
                    let r2 = x * x + y * y + p * p;
                    if r2 >= 25.0 {
                        decay5 = decay5.max(v.abs());
                    }
                    if r2 >= 36.0 {
                        decay = decay.max(v.abs());
                    }
                }
            }
        }
        let mass = m0 * dv;
        let (ex, ey, ep) = (mx / m0, my / m0, mp / m0);
        let hxy = s.x.step() * s.y.step();
        let phi_marginal_error = ps
            .iter()
            .zip(&phi_marginal)
            .map(|(&p, &m)| (m * hxy - (-0.5 * p * p).exp() / (2.0 * PI).sqrt()).abs())
            .fold(0.0f64, f64::max);
        GridSummary {
            mass,
            xc_mean: ex,
            yc_var: myy / m0 - ey * ey,
            yc_phic_cov: myp / m0 - ey * ep,
            phic_var: mpp / m0 - ep * ep,
            support_violation: violation,
            phi_marginal_error,
            min_value,
            decay_outside_5: decay5,
            decay_outside_6: decay,
        }
    }

    /// Block average by factors `(fx, fy, fp)`; preserves the Riemann mass.
    pub fn coarsen(&self, fx: usize, fy: usize, fp: usize) -> Result<DensityGrid> {
        let spec = self.spec.coarsen(fx, fy, fp)?;
        let mut out = DensityGrid::zeros(spec, self.kind);
        let norm = 1.0 / (fx * fy * fp) as f64;
        for ip in 0..self.spec.phi.n {
            for iy in 0..self.spec.y.n {
                for ix in 0..self.spec.x.n {
                    let k = spec.index(ix / fx, iy / fy, ip / fp);
                    out.values[k] += self.get(ix, iy, ip) * norm;
                }
            }
        }
        Ok(out)
    }

    /// `sum |a - b| * cell volume`; both grids must share axes.
    pub fn l1_distance(&self, other: &DensityGrid) -> Result<f64> {
        if self.spec.x != other.spec.x || self.spec.y != other.spec.y || self.spec.phi != other.spec.phi {
            return Err(Error::InvalidGrid("L1 distance needs identical axes".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.spec.cell_volume())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn write_binary<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        w.write_all(MAGIC)?;
        w.write_all(&[self.kind.tag()])?;
        for a in [&self.spec.x, &self.spec.y, &self.spec.phi] {
            w.write_all(&a.min.to_le_bytes())?;
            w.write_all(&a.max.to_le_bytes())?;
            w.write_all(&(a.n as u64).to_le_bytes())?;
        }
        for ix in 0..self.spec.x.n {
            for iy in 0..self.spec.y.n {
                for ip in 0..self.spec.phi.n {
                    w.write_all(&self.get(ix, iy, ip).to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(r: R) -> Result<DensityGrid> {
        let mut r = BufReader::new(r);
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let kind = GridKind::from_tag(tag[0])?;
        let mut buf = [0u8; 8];
        let mut axes = Vec::with_capacity(3);
        for _ in 0..3 {
            r.read_exact(&mut buf)?;
            let min = f64::from_le_bytes(buf);
            r.read_exact(&mut buf)?;
            let max = f64::from_le_bytes(buf);
            r.read_exact(&mut buf)?;
            let n = u64::from_le_bytes(buf) as usize;
            axes.push(Axis::new(min, max, n));
        }
        let spec = GridSpec::with_axes(axes[0], axes[1], axes[2]);
        spec.validate()?;
        let mut values = vec![0.0; spec.len()];
        for ix in 0..spec.x.n {
            for iy in 0..spec.y.n {
                for ip in 0..spec.phi.n {
                    r.read_exact(&mut buf)
                        .map_err(|_| Error::Format("truncated value block".into()))?;
                    values[spec.index(ix, iy, ip)] = f64::from_le_bytes(buf);
                }
            }
        }
        if r.fill_buf()?.is_empty() {
            Ok(DensityGrid { spec, kind, values })
        } else {
            Err(Error::Format("trailing bytes after value block".into()))
        }
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        self.write_binary(std::fs::File::create(path)?)
    }

    pub fn load_binary(path: &Path) -> Result<DensityGrid> {
        Self::read_binary(std::fs::File::open(path)?)
    }

    /// CSV with header `xc,yc,phic,value`; density values are clamped at 0.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        writeln!(w, "xc,yc,phic,value")?;
        let clamp = self.kind == GridKind::Density;
        for ix in 0..self.spec.x.n {
            for iy in 0..self.spec.y.n {
                for ip in 0..self.spec.phi.n {
                    let p = self.spec.node(ix, iy, ip);
                    let mut v = self.get(ix, iy, ip);
                    if clamp {
                        v = v.max(0.0);
                    }
                    writeln!(w, "{:.16e},{:.16e},{:.16e},{:.16e}", p.x, p.y, p.phi, v)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

const MAGIC: &[u8; 7] = b"KKGRID1";

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> GridSpec {
        GridSpec {
            x: Axis::new(-4.5, 0.5, 256),
            y: Axis::new(-4.5, 4.5, 32),
            phi: Axis::new(-4.5, 4.5, 32),
            cutoffs: Cutoffs {
                lambda: 400.0,
                mu: 64.0,
                nu: 64.0,
            },
            tolerance: 1.0,
            ..GridSpec::default()
        }
    }

    #[test]
    fn validation() {
        assert!(GridSpec::default().validate().is_ok());
        let mut s = GridSpec::default();
        s.y.n = 100;
        assert!(s.validate().is_err());
        s.y.n = 4;
        assert!(s.validate().is_err());
        let mut s = GridSpec::default();
        s.x = Axis::new(1.0, 1.0, 16);
        assert!(s.validate().is_err());
        let mut s = GridSpec::default();
        s.cutoffs.lambda = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn support_predicates() {
        assert!(in_support(MicroPoint::new(-1.0, 0.0, 0.0)));
        let b = MicroPoint::new(-0.5, 1.0, 0.0);
        assert!(!in_support(b) && on_support_closure(b));
        let o = MicroPoint::new(1.0, 0.0, 0.0);
        assert!(!in_support(o) && !on_support_closure(o));
    }

    #[test]
    fn resolution_rejects_coarse_cutoff() {
        let mut s = GridSpec::default();
        s.cutoffs.lambda = 200.0;
        s.tolerance = 1e-3;
        assert!(matches!(invert(&s), Err(Error::Resolution { .. })));
        let mut s = GridSpec::default();
        s.x.n = 128;
        assert!(resolution_report(&s).x_alias > 1e-3);
        let r = resolution_report(&GridSpec::default());
        assert!(r.estimate() < 1e-3, "{r:?}");
    }

    #[test]
    fn direct_triple_sum_matches_gaussian_marginal_route() {
        let cut = Cutoffs {
            lambda: 10.0,
            mu: 30.0,
            nu: 30.0,
        };
        let steps = Cutoffs {
            lambda: 0.5,
            mu: 0.25,
            nu: 0.25,
        };
        let kernel = SpectralKernel::new(cut.lambda, steps.lambda).unwrap();
        for p in [
            MicroPoint::new(-0.3, 0.1, 0.4),
            MicroPoint::new(-1.0, -0.5, 1.0),
            MicroPoint::new(0.2, 0.0, 0.0),
        ] {
            let a = invert_direct(p, cut, steps);
            let b = kernel.density(p);
            assert!((a - b).abs() < 1e-8, "{p:?}: {a} vs {b}");
        }
    }

    #[test]
    fn kernel_derivatives_match_differences() {
        let k = SpectralKernel::new(3000.0, 0.5).unwrap();
        let p = MicroPoint::new(-0.7, 0.3, 0.5);
        let v = k.eval(p);
        let h = 1e-4;
        let fx = (k.density(MicroPoint::new(p.x + h, p.y, p.phi))
            - k.density(MicroPoint::new(p.x - h, p.y, p.phi)))
            / (2.0 * h);
        let fy = (k.density(MicroPoint::new(p.x, p.y + h, p.phi))
            - k.density(MicroPoint::new(p.x, p.y - h, p.phi)))
            / (2.0 * h);
        assert!((v.dx - fx).abs() < 1e-6 * (1.0 + fx.abs()), "{} vs {fx}", v.dx);
        assert!((v.dy - fy).abs() < 1e-6 * (1.0 + fy.abs()), "{} vs {fy}", v.dy);
    }

    #[test]
    fn grid_matches_kernel_pointwise() {
        let spec = small_spec();
        let set = invert_all(
            &spec,
            Outputs {
                density: true,
                dx: true,
                dy: true,
            },
        )
        .unwrap();
        let k = SpectralKernel::from_spec(&spec).unwrap();
        for &(ix, iy, ip) in &[(200, 16, 16), (150, 12, 20), (230, 17, 15)] {
            let v = k.eval(spec.node(ix, iy, ip));
            assert!((set.density.get(ix, iy, ip) - v.value).abs() < 1e-12);
            assert!((set.dx.as_ref().unwrap().get(ix, iy, ip) - v.dx).abs() < 1e-9);
            assert!((set.dy.as_ref().unwrap().get(ix, iy, ip) - v.dy).abs() < 1e-10);
        }
    }

    #[test]
    fn trilinear_eval() {
        let spec = GridSpec::with_axes(
            Axis::new(0.0, 7.0, 8),
            Axis::new(0.0, 7.0, 8),
            Axis::new(0.0, 7.0, 8),
        );
        let mut g = DensityGrid::zeros(spec, GridKind::Correction);
        for ix in 0..8 {
            for iy in 0..8 {
                for ip in 0..8 {
                    let k = spec.index(ix, iy, ip);
                    g.values[k] = (ix * 100 + iy * 10 + ip) as f64;
                }
            }
        }
        assert_eq!(g.eval(MicroPoint::new(3.0, 4.0, 5.0)).unwrap(), 345.0);
        assert_eq!(g.eval(MicroPoint::new(7.0, 7.0, 7.0)).unwrap(), 777.0);
        assert_eq!(g.eval(MicroPoint::new(3.5, 4.0, 5.0)).unwrap(), 395.0);
        match g.eval(MicroPoint::new(3.0, 8.5, 0.0)) {
            Err(Error::OutOfBounds { axis, .. }) => assert_eq!(axis, GridAxis::Y),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn coarsen_preserves_mass() {
        let spec = GridSpec::with_axes(
            Axis::new(-1.0, 1.0, 16),
            Axis::new(-1.0, 1.0, 8),
            Axis::new(-1.0, 1.0, 8),
        );
        let mut g = DensityGrid::zeros(spec, GridKind::Density);
        for (i, v) in g.values.iter_mut().enumerate() {
            *v = (i % 7) as f64;
        }
        let c = g.coarsen(4, 2, 2).unwrap();
        assert_eq!(c.spec.x.n, 4);
        assert!((c.integral() - g.integral()).abs() < 1e-12);
        assert!((c.spec.x.step() - 4.0 * spec.x.step()).abs() < 1e-15);
        assert!(g.coarsen(3, 1, 1).is_err());
    }

    #[test]
    fn binary_round_trip_and_rejections() {
        let spec = GridSpec::with_axes(
            Axis::new(-1.0, 1.0, 8),
            Axis::new(-2.0, 2.0, 8),
            Axis::new(-3.0, 3.0, 16),
        );
        let mut g = DensityGrid::zeros(spec, GridKind::DyDensity);
        for (i, v) in g.values.iter_mut().enumerate() {
            *v = (i as f64).sin() * 1e-7 + 1.0 / 3.0;
        }
        let mut buf = Vec::new();
        g.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..7], b"KKGRID1");
        assert_eq!(buf.len(), 7 + 1 + 3 * 24 + 8 * spec.len());
        let back = DensityGrid::read_binary(&buf[..]).unwrap();
        assert_eq!(back.kind, g.kind);
        assert_eq!(back.values, g.values);
        assert_eq!(back.spec.x, g.spec.x);
        assert!(DensityGrid::read_binary(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(DensityGrid::read_binary(&bad[..]).is_err());
        let mut bad = buf.clone();
        bad[7] = 9;
        assert!(DensityGrid::read_binary(&bad[..]).is_err());
        let mut long = buf;
        long.push(0);
        assert!(DensityGrid::read_binary(&long[..]).is_err());
    }

    #[test]
    fn csv_clamps_density() {
        let spec = GridSpec::with_axes(
            Axis::new(0.0, 1.0, 8),
            Axis::new(0.0, 1.0, 8),
            Axis::new(0.0, 1.0, 8),
        );
        let mut g = DensityGrid::zeros(spec, GridKind::Density);
        g.values[0] = -1e-7;
        let mut out = Vec::new();
        g.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("xc,yc,phic,value"));
        let first: Vec<f64> = lines.next().unwrap().split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(first[3], 0.0);
        assert_eq!(text.lines().count(), 1 + 512);
    }
}
