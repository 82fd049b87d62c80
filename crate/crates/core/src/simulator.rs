//! Monte Carlo samplers for the kinetic diffusion, its first-order
//! approximation and the limit vector `xi`.
//!
//! Brownian paths are built by midpoint bridge refinement in breadth-first
//! order, so with a power-of-two step count the path at `2n` steps refines
//! the path at `n` steps drawn from the same seed.

use std::collections::VecDeque;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{DensityGrid, GridKind, GridSpec};
use crate::error::{Error, Result};
use crate::scaling::{frame, MicroPoint, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master: u64,
    pub stream: u64,
}

impl SeedSpec {
    pub fn new(master: u64, stream: u64) -> Self {
        SeedSpec { master, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(self.stream);
        rng
    }
}

/// Source of Brownian increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    Seeded(SeedSpec),
    /// Every Gaussian draw replaced by 0: the noiseless system.
    Zero,
}

impl From<SeedSpec> for Noise {
    fn from(s: SeedSpec) -> Self {
        Noise::Seeded(s)
    }
}

/// Brownian motion on `[0, t]` sampled at `n_steps + 1` uniform times.
pub fn brownian_path(t: f64, n_steps: usize, noise: Noise) -> Vec<f64> {
    let mut w = vec![0.0; n_steps + 1];
    let mut draw: Box<dyn FnMut() -> f64> = match noise {
        Noise::Seeded(s) => {
            let mut rng = s.rng();
            Box::new(move || rng.sample::<f64, _>(StandardNormal))
        }
        Noise::Zero => Box::new(|| 0.0),
    };
    let dt = t / n_steps as f64;
    w[n_steps] = t.sqrt() * draw();
    let mut queue = VecDeque::from([(0usize, n_steps)]);
    while let Some((lo, hi)) = queue.pop_front() {
        if hi - lo < 2 {
            continue;
        }
        let mid = (lo + hi) / 2;
        let (a, b) = ((mid - lo) as f64 * dt, (hi - mid) as f64 * dt);
        let mean = (b * w[lo] + a * w[hi]) / (a + b);
        w[mid] = mean + (a * b / (a + b)).sqrt() * draw();
        queue.push_back((lo, mid));
        queue.push_back((mid, hi));
    }
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub times: Vec<f64>,
    pub w: Vec<f64>,
    pub p: Vec<Point>,
}

fn check_steps(n_steps: usize) -> Result<()> {
    if n_steps < 2 {
        return Err(Error::InvalidInput(format!("n_steps must be >= 2, got {n_steps}")));
    }
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidInput(format!("time must be positive, got {t}")));
    }
    Ok(())
}

/// Path of `dx = cos(phi) dt, dy = sin(phi) dt, dphi = dW` from `p0`, with
/// the plane coordinates integrated by the trapezoid rule.
pub fn sample_path(t: f64, n_steps: usize, noise: impl Into<Noise>, p0: Point) -> Result<PathSample> {
    check_time(t)?;
    check_steps(n_steps)?;
    let w = brownian_path(t, n_steps, noise.into());
    let dt = t / n_steps as f64;
    let times = (0..=n_steps)
        .map(|k| if k == n_steps { t } else { k as f64 * dt })
        .collect();
    let mut p = Vec::with_capacity(n_steps + 1);
    p.push(p0);
    let (mut x, mut y) = (p0.x, p0.y);
    let (mut c0, mut s0) = (p0.phi.cos(), p0.phi.sin());
    for k in 0..n_steps {
        let phi = p0.phi + w[k + 1];
        let (s1, c1) = phi.sin_cos();
        x += 0.5 * dt * (c0 + c1);
        y += 0.5 * dt * (s0 + s1);
        p.push(Point::new(x, y, phi));
        c0 = c1;
        s0 = s1;
    }
    Ok(PathSample { times, w, p })
}

/// Endpoint of the true diffusion at time `t`, expressed in microscopic
/// coordinates around `p0` with `tau = sqrt(t)`.
///
/// Accumulates `int (X(p_s) - X(p0)) ds` through half-angle products so the
/// `t^2` and `t^{3/2}` rescalings do not amplify cancellation.
pub fn sample_micro_endpoint(t: f64, n_steps: usize, noise: impl Into<Noise>, p0: Point) -> Result<MicroPoint> {
    check_time(t)?;
    check_steps(n_steps)?;
    let w = brownian_path(t, n_steps, noise.into());
    let dt = t / n_steps as f64;
    let phi0 = p0.phi;
    let dev = |dw: f64| {
        // X(phi0 + dw) - X(phi0)
        let half = 0.5 * dw;
        let s = half.sin();
        let mid = phi0 + half;
        (-2.0 * mid.sin() * s, 2.0 * mid.cos() * s)
    };
    let (mut dx, mut dy) = (0.0, 0.0);
    let mut prev = (0.0, 0.0);
    for k in 0..n_steps {
        let cur = dev(w[k + 1]);
        dx += 0.5 * dt * (prev.0 + cur.0);
        dy += 0.5 * dt * (prev.1 + cur.1);
        prev = cur;
    }
    let m = frame(p0).inverse();
    let v = m.matrix() * nalgebra::Vector3::new(dx, dy, w[n_steps]);
    let tau = t.sqrt();
    Ok(MicroPoint::new(
        v[0] / (tau * tau * tau * tau),
        v[1] / (tau * tau * tau),
        v[2] / tau,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XiSample {
    pub xi_x: f64,
    pub xi_y: f64,
    pub xi_phi: f64,
}

impl XiSample {
    pub fn as_micro(&self) -> MicroPoint {
        MicroPoint::new(self.xi_x, self.xi_y, self.xi_phi)
    }

    /// `-2 xi_x - xi_y^2`, nonnegative by Cauchy-Schwarz.
    pub fn support_slack(&self) -> f64 {
        -2.0 * self.xi_x - self.xi_y * self.xi_y
    }
}

fn xi_from_path(w: &[f64]) -> XiSample {
    let n = w.len() - 1;
    let h = 1.0 / n as f64;
    let (mut s1, mut s2) = (0.0, 0.0);
    for k in 0..n {
        s1 += 0.5 * h * (w[k] + w[k + 1]);
        s2 += 0.5 * h * (w[k] * w[k] + w[k + 1] * w[k + 1]);
    }
    XiSample {
        xi_x: -0.5 * s2,
        xi_y: s1,
        xi_phi: w[n],
    }
}

/// `(-1/2 int W^2, int W, W_1)` by the trapezoid rule on `[0, 1]`.
pub fn sample_xi(n_steps: usize, noise: impl Into<Noise>) -> Result<XiSample> {
    check_steps(n_steps)?;
    Ok(xi_from_path(&brownian_path(1.0, n_steps, noise.into())))
}

/// Endpoint of the approximate diffusion at time `t`: exact in law, built
/// from one `xi` sample by Brownian scaling.
pub fn sample_tilde(t: f64, p0: Point, n_steps: usize, noise: impl Into<Noise>) -> Result<Point> {
    check_time(t)?;
    let xi = sample_xi(n_steps, noise)?;
    let local = nalgebra::Vector3::new(
        t + t * t * xi.xi_x,
        t * t.sqrt() * xi.xi_y,
        t.sqrt() * xi.xi_phi,
    );
    Ok(Point::from_vector(p0.to_vector() + frame(p0).matrix() * local))
}

/// `n` samples with streams `0..n` of `master`, in stream order.
pub fn xi_batch(n: usize, n_steps: usize, master: u64) -> Result<Vec<XiSample>> {
    check_steps(n_steps)?;
    Ok((0..n as u64)
        .into_par_iter()
        .map(|i| xi_from_path(&brownian_path(1.0, n_steps, Noise::Seeded(SeedSpec::new(master, i)))))
        .collect())
}

pub fn micro_batch(t: f64, n: usize, n_steps: usize, master: u64, p0: Point) -> Result<Vec<MicroPoint>> {
    check_time(t)?;
    check_steps(n_steps)?;
    (0..n as u64)
        .into_par_iter()
        .map(|i| sample_micro_endpoint(t, n_steps, SeedSpec::new(master, i), p0))
        .collect()
}

pub fn tilde_batch(t: f64, n: usize, n_steps: usize, master: u64, p0: Point) -> Result<Vec<Point>> {
    check_time(t)?;
    check_steps(n_steps)?;
    (0..n as u64)
        .into_par_iter()
        .map(|i| sample_tilde(t, p0, n_steps, SeedSpec::new(master, i)))
        .collect()
}

/// Node-centred 3D histogram: the cell of node `i` is `[x_i - h/2, x_i + h/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub spec: GridSpec,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    pub fn new(spec: GridSpec) -> Self {
        Histogram {
            spec,
            counts: vec![0; spec.len()],
            total: 0,
        }
    }

    fn cell(&self, v: f64, a: &crate::density::Axis) -> Option<usize> {
        let t = ((v - a.min) / a.step() + 0.5).floor();
        (t >= 0.0 && t < a.n as f64).then_some(t as usize)
    }

    pub fn add(&mut self, p: MicroPoint) {
        self.total += 1;
        let s = self.spec;
        if let (Some(ix), Some(iy), Some(ip)) = (
            self.cell(p.x, &s.x),
            self.cell(p.y, &s.y),
            self.cell(p.phi, &s.phi),
        ) {
            self.counts[s.index(ix, iy, ip)] += 1;
        }
    }

    pub fn merge(mut self, other: Histogram) -> Histogram {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        self
    }

    pub fn inside(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_density(&self) -> DensityGrid {
        let scale = 1.0 / (self.total as f64 * self.spec.cell_volume());
        DensityGrid {
            spec: self.spec,
            kind: GridKind::Density,
            values: self.counts.iter().map(|&c| c as f64 * scale).collect(),
        }
    }
}

pub const MIN_HISTOGRAM_SAMPLES: usize = 10_000;

pub fn empirical_density(samples: &[MicroPoint], spec: &GridSpec) -> Result<DensityGrid> {
    if samples.len() < MIN_HISTOGRAM_SAMPLES {
        return Err(Error::TooFewSamples {
            got: samples.len(),
            need: MIN_HISTOGRAM_SAMPLES,
        });
    }
    spec.validate()?;
    let mut h = Histogram::new(*spec);
    for &p in samples {
        h.add(p);
    }
    Ok(h.to_density())
}

const HISTOGRAM_CHUNK: u64 = 1 << 16;

/// Streams `n` samples produced by `sample(stream)` into a histogram without
/// storing them. Counts are integers, so the result does not depend on how
/// the work is split across threads.
pub fn stream_histogram<F>(n: u64, spec: &GridSpec, sample: F) -> Result<Histogram>
where
    F: Fn(u64) -> Result<MicroPoint> + Sync,
{
    if (n as usize) < MIN_HISTOGRAM_SAMPLES {
        return Err(Error::TooFewSamples {
            got: n as usize,
            need: MIN_HISTOGRAM_SAMPLES,
        });
    }
    spec.validate()?;
    let chunks = n.div_ceil(HISTOGRAM_CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut h = Histogram::new(*spec);
            for i in c * HISTOGRAM_CHUNK..((c + 1) * HISTOGRAM_CHUNK).min(n) {
                h.add(sample(i)?);
            }
            Ok(h)
        })
        .try_reduce(|| Histogram::new(*spec), |a, b| Ok(a.merge(b)))
}

pub fn xi_histogram(n: u64, n_steps: usize, master: u64, spec: &GridSpec) -> Result<Histogram> {
    check_steps(n_steps)?;
    stream_histogram(n, spec, |i| {
        Ok(sample_xi(n_steps, SeedSpec::new(master, i))?.as_micro())
    })
}

pub fn micro_histogram(t: f64, n: u64, n_steps: usize, master: u64, spec: &GridSpec) -> Result<Histogram> {
    check_time(t)?;
    check_steps(n_steps)?;
    stream_histogram(n, spec, |i| {
        sample_micro_endpoint(t, n_steps, SeedSpec::new(master, i), Point::ORIGIN)
    })
}

/// Two-sample Kolmogorov-Smirnov statistic and its asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    (d, kolmogorov_q(lambda))
}

/// `Q(l) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 l^2)`.
fn kolmogorov_q(l: f64) -> f64 {
    if l < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * l * l).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub kind: String,
    pub master_seed: u64,
    pub stream_count: u64,
    pub n_steps: usize,
    pub t: Option<f64>,
    pub version: String,
}

impl SampleManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(f), self)?;
        Ok(())
    }
}

pub fn write_macro_csv<W: Write>(w: W, points: &[Point]) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "x,y,phi")?;
    for p in points {
        writeln!(w, "{:.16e},{:.16e},{:.16e}", p.x, p.y, p.phi)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_micro_csv<W: Write>(w: W, points: &[MicroPoint]) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "xc,yc,phic")?;
    for p in points {
        writeln!(w, "{:.16e},{:.16e},{:.16e}", p.x, p.y, p.phi)?;
    }
    w.flush()?;
    Ok(())
}
