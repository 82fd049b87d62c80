//! Command-line front end: argument and config parsing, subcommands and the
//! per-module check suites.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::charfn::{certified_slice, closed_form, compare_grid, gaussian_slice, product_form, FreqPoint, QuadCoeffs};
use crate::density::{invert_all, Axis, DensityGrid, GridSpec, Outputs, SpectralKernel};
use crate::duhamel::{
    default_correction_spec, error_term, first_correction, leading_sup_norm, order_fit, residual_by_differences,
    CorrectionQuadrature, GridKernel,
};
use crate::error::{Error, Result};
use crate::ldp::{i_macro, i_meso, pendulum_shoot, LdpOptions, Rate};
use crate::scaling::{MicroPoint, Point};
use crate::simulator::{micro_batch, sample_path, write_macro_csv, write_micro_csv, xi_batch, SampleManifest, SeedSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_TOLERANCE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "kbm", version, about = "Small-time kernel asymptotics of planar kinetic Brownian motion")]
pub struct Cli {
    /// TOML config with one section per subcommand; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,
    /// Run the module's invariant suite instead of the subcommand.
    #[arg(long, global = true)]
    pub check: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form vs product characteristic function table.
    Charfn(CharfnArgs),
    /// Density and gradient grids by Fourier inversion.
    Density(DensityArgs),
    /// Endpoint samples of the diffusion or of the limit variable.
    Simulate(SimulateArgs),
    /// First Duhamel correction and the order ladder.
    Correction(CorrectionArgs),
    /// Mesoscopic rate at a point.
    Ldp(LdpArgs),
    /// Shooting solution of the pendulum problem (conjectural optimiser).
    Pendulum(PendulumArgs),
    /// Run every module's invariant suite.
    Check,
}

fn parse_count(s: &str) -> std::result::Result<u64, String> {
    let v: f64 = s.trim().parse().map_err(|e| format!("{s}: {e}"))?;
    if !(v >= 0.0 && v.fract() == 0.0 && v <= 2f64.powi(53)) {
        return Err(format!("{s}: expected a non-negative integer"));
    }
    Ok(v as u64)
}

fn count_de<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<u64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(u64),
        Float(f64),
        Text(String),
    }
    match Option::<Raw>::deserialize(d)? {
        None => Ok(None),
        Some(Raw::Int(v)) => Ok(Some(v)),
        Some(Raw::Float(v)) => parse_count(&v.to_string()).map(Some).map_err(serde::de::Error::custom),
        Some(Raw::Text(s)) => parse_count(&s).map(Some).map_err(serde::de::Error::custom),
    }
}

fn parse_triple(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("{s}: expected three comma-separated numbers"));
    }
    let mut out = [0.0f64; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|e| format!("{p}: {e}"))?;
        if !o.is_finite() {
            return Err(format!("{p}: not finite"));
        }
    }
    Ok(out)
}

/// Field-wise `flag.or(config)`.
trait Merge {
    fn merge(self, config: Self) -> Self;
}

macro_rules! merge_impl {
    ($t:ty { $($opt:ident),* } bools { $($flag:ident),* }) => {
        impl Merge for $t {
            fn merge(self, c: Self) -> Self {
                Self { $($opt: self.$opt.or(c.$opt),)* $($flag: self.$flag || c.$flag,)* }
            }
        }
    };
}

#[derive(Debug, Clone, Default, Args, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharfnArgs {
    /// Lower end of the cube in each frequency.
    #[arg(long, allow_negative_numbers = true)]
    pub min: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub max: Option<f64>,
    /// Points per axis.
    #[arg(long)]
    pub points: Option<usize>,
    /// Maximum allowed disagreement.
    #[arg(long)]
    pub target: Option<f64>,
    /// Single point `lambda,mu,nu` instead of the cube.
    #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
    pub point: Option<[f64; 3]>,
    /// Also emit the lambda = 0 comparison with the Gaussian.
    #[arg(long)]
    pub gaussian_slice: bool,
}
merge_impl!(CharfnArgs { min, max, points, target, point } bools { gaussian_slice });

#[derive(Debug, Clone, Default, Args, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityArgs {
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long)]
    pub ny: Option<usize>,
    #[arg(long)]
    pub nphi: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub x_min: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub x_max: Option<f64>,
    /// Half-width of the `y` and `phi` axes.
    #[arg(long)]
    pub half_width: Option<f64>,
    #[arg(long)]
    pub lambda_cutoff: Option<f64>,
    #[arg(long)]
    pub lambda_step: Option<f64>,
    /// Resolution tolerance.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Also write a CSV of the grid coarsened by (16, 2, 2).
    #[arg(long)]
    pub csv: bool,
}
merge_impl!(DensityArgs { nx, ny, nphi, x_min, x_max, half_width, lambda_cutoff, lambda_step, tolerance } bools { csv });

impl DensityArgs {
    fn spec(&self) -> GridSpec {
        let d = GridSpec::default();
        let hw = self.half_width;
        let mut s = GridSpec::with_axes(
            Axis::new(self.x_min.unwrap_or(d.x.min), self.x_max.unwrap_or(d.x.max), self.nx.unwrap_or(d.x.n)),
            Axis::new(hw.map_or(d.y.min, |h| -h), hw.unwrap_or(d.y.max), self.ny.unwrap_or(d.y.n)),
            Axis::new(hw.map_or(d.phi.min, |h| -h), hw.unwrap_or(d.phi.max), self.nphi.unwrap_or(d.phi.n)),
        );
        s.cutoffs.lambda = self.lambda_cutoff.unwrap_or(d.cutoffs.lambda);
        s.steps.lambda = self.lambda_step.unwrap_or(d.steps.lambda);
        s.tolerance = self.tolerance.unwrap_or(d.tolerance);
        s
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateArgs {
    /// Time horizon of the diffusion; without it the limit variable is sampled.
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long, value_parser = parse_count)]
    #[serde(deserialize_with = "count_de")]
    pub samples: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write microscopic coordinates.
    #[arg(long)]
    pub rescale: bool,
}
merge_impl!(SimulateArgs { t, samples, steps, seed } bools { rescale });

#[derive(Debug, Clone, Default, Args, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionArgs {
    #[arg(long)]
    pub tau: Option<f64>,
    /// Values of t = tau^2 used for the order fit.
    #[arg(long, value_delimiter = ',')]
    pub ladder: Option<Vec<f64>>,
    #[arg(long)]
    pub sigma_nodes: Option<usize>,
    /// Directory with `density.grid`, `dx.grid`, `dy.grid` from a density run.
    #[arg(long)]
    pub grids: Option<PathBuf>,
    /// Also run a coarser quadrature and report the difference.
    #[arg(long)]
    pub estimate_error: bool,
}
merge_impl!(CorrectionArgs { tau, ladder, sigma_nodes, grids } bools { estimate_error });

#[derive(Debug, Clone, Default, Args, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdpArgs {
    /// Mesoscopic point `x,y,phi`.
    #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
    pub point: Option<[f64; 3]>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub starts: Option<usize>,
}
merge_impl!(LdpArgs { point, n, starts } bools {});

#[derive(Debug, Clone, Default, Args, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumArgs {
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Skip the comparison with the variational solver.
    #[arg(long)]
    pub no_compare: bool,
}
merge_impl!(PendulumArgs { tol, n } bools { no_compare });

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunSection {
    threads: Option<usize>,
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    run: RunSection,
    charfn: CharfnArgs,
    density: DensityArgs,
    simulate: SimulateArgs,
    correction: CorrectionArgs,
    ldp: LdpArgs,
    pendulum: PendulumArgs,
}

/// One line of a check suite.
#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckLine {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckLine {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Outcome of a subcommand: pass/fail of its tolerance checks.
struct Outcome {
    passed: bool,
}

struct Ctx {
    out: PathBuf,
    threads: usize,
    command: &'static str,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    /// Parameters, version and time of the run. The only file with a timestamp.
    fn manifest<T: Serialize>(&self, params: &T) -> Result<()> {
        #[derive(Serialize)]
        struct Manifest<'a, T> {
            command: &'a str,
            version: &'a str,
            threads: usize,
            unix_time: u64,
            parameters: &'a T,
        }
        let unix_time = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        self.write_json(
            "manifest.json",
            &Manifest {
                command: self.command,
                version: env!("CARGO_PKG_VERSION"),
                threads: self.threads,
                unix_time,
                parameters: params,
            },
        )
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let config = match &cli.config {
        None => ConfigFile::default(),
        Some(path) => match fs::read_to_string(path)
            .map_err(Error::from)
            .and_then(|s| toml::from_str::<ConfigFile>(&s).map_err(|e| Error::Config(e.to_string())))
        {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_USAGE;
            }
        },
    };
    let threads = cli
        .threads
        .or(config.run.threads)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        eprintln!("error: --threads must be positive");
        return EXIT_USAGE;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_USAGE;
        }
    };
    let out = cli.out.clone().or(config.run.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let result = pool.install(|| dispatch(cli, config, out, threads));
    match result {
        Ok(Outcome { passed: true }) => EXIT_OK,
        Ok(Outcome { passed: false }) => EXIT_TOLERANCE,
        Err(e @ (Error::InvalidInput(_) | Error::Config(_) | Error::InvalidGrid(_) | Error::DegenerateDilation { .. })) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_TOLERANCE
        }
    }
}

fn dispatch(cli: Cli, config: ConfigFile, out: PathBuf, threads: usize) -> Result<Outcome> {
    let name = match &cli.command {
        Command::Charfn(_) => "charfn",
        Command::Density(_) => "density",
        Command::Simulate(_) => "simulate",
        Command::Correction(_) => "correction",
        Command::Ldp(_) => "ldp",
        Command::Pendulum(_) => "pendulum",
        Command::Check => "check",
    };
    if cli.check || matches!(cli.command, Command::Check) {
        let lines = if name == "check" { check_all() } else { check_suite(name) };
        return Ok(report_checks(&lines));
    }
    fs::create_dir_all(&out)?;
    let ctx = Ctx {
        out,
        threads,
        command: name,
    };
    match cli.command {
        Command::Charfn(a) => cmd_charfn(&ctx, a.merge(config.charfn)),
        Command::Density(a) => cmd_density(&ctx, a.merge(config.density)),
        Command::Simulate(a) => cmd_simulate(&ctx, a.merge(config.simulate)),
        Command::Correction(a) => cmd_correction(&ctx, a.merge(config.correction)),
        Command::Ldp(a) => cmd_ldp(&ctx, a.merge(config.ldp)),
        Command::Pendulum(a) => cmd_pendulum(&ctx, a.merge(config.pendulum)),
        Command::Check => unreachable!("handled above"),
    }
}

fn report_checks(lines: &[CheckLine]) -> Outcome {
    for l in lines {
        println!("{} {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
    }
    Outcome {
        passed: lines.iter().all(|l| l.passed),
    }
}

fn axis_values(min: f64, max: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![min];
    }
    (0..n).map(|i| min + (max - min) * i as f64 / (n - 1) as f64).collect()
}

fn cmd_charfn(ctx: &Ctx, a: CharfnArgs) -> Result<Outcome> {
    let target = a.target.unwrap_or(1e-6);
    if !(target > 0.0) {
        return Err(Error::InvalidInput("target must be positive".into()));
    }
    let (lambdas, mus, nus) = match a.point {
        Some([l, m, n]) => (vec![l], vec![m], vec![n]),
        None => {
            let (lo, hi, n) = (a.min.unwrap_or(-10.0), a.max.unwrap_or(10.0), a.points.unwrap_or(21));
            if n == 0 || !(lo <= hi) {
                return Err(Error::InvalidInput("need points >= 1 and min <= max".into()));
            }
            let v = axis_values(lo, hi, n);
            (v.clone(), v.clone(), v)
        }
    };
    let certify = 0.5 * target;
    let rows: Vec<Vec<(FreqPoint, [f64; 5])>> = lambdas
        .par_iter()
        .map(|&lambda| {
            let slice = certified_slice(lambda, &mus, &nus, certify, 1024);
            let coeffs = QuadCoeffs::new(lambda);
            let mut rows = Vec::with_capacity(mus.len() * nus.len());
            for &mu in &mus {
                for &nu in &nus {
                    let c = coeffs.eval(mu, nu);
                    let p = slice.eval(mu, nu);
                    rows.push((FreqPoint::new(lambda, mu, nu), [c.re, c.im, p.re, p.im, (c - p).norm()]));
                }
            }
            rows
        })
        .collect();
    let mut w = ctx.create("charfn.csv")?;
    writeln!(w, "lambda,mu,nu,closed_re,closed_im,product_re,product_im,disagreement")?;
    let mut worst = 0.0f64;
    for (q, v) in rows.iter().flatten() {
        worst = worst.max(v[4]);
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            q.lambda, q.mu, q.nu, v[0], v[1], v[2], v[3], v[4]
        )?;
    }
    w.flush()?;
    let mut passed = worst < target;
    #[derive(Serialize)]
    struct Summary {
        points: usize,
        max_disagreement: f64,
        target: f64,
        certified_truncation: f64,
        passed: bool,
        gaussian_slice_max_error: Option<f64>,
    }
    let mut gauss = None;
    if a.gaussian_slice {
        let v = axis_values(-10.0, 10.0, 41);
        let mut w = ctx.create("gaussian_slice.csv")?;
        writeln!(w, "mu,nu,closed_re,closed_im,gaussian,difference")?;
        let mut g = 0.0f64;
        for &mu in &v {
            for &nu in &v {
                let c = closed_form(FreqPoint::new(0.0, mu, nu));
                let e = gaussian_slice(mu, nu);
                let d = (c - e).norm();
                g = g.max(d);
                writeln!(w, "{mu:.16e},{nu:.16e},{:.16e},{:.16e},{e:.16e},{d:.16e}", c.re, c.im)?;
            }
        }
        w.flush()?;
        passed &= g <= 1e-12;
        gauss = Some(g);
    }
    ctx.write_json(
        "charfn.json",
        &Summary {
            points: rows.iter().map(Vec::len).sum(),
            max_disagreement: worst,
            target,
            certified_truncation: certify,
            passed,
            gaussian_slice_max_error: gauss,
        },
    )?;
    ctx.manifest(&a)?;
    println!("max disagreement {worst:.3e} (target {target:.1e})");
    Ok(Outcome { passed })
}

/// Tolerances on the density summary.
#[derive(Debug, Clone, Copy, Serialize)]
struct DensityChecks {
    mass: bool,
    moments: bool,
    support: bool,
}

fn density_checks(s: &crate::density::GridSummary) -> DensityChecks {
    let moments = [
        (s.xc_mean, -0.25),
        (s.yc_var, 1.0 / 3.0),
        (s.yc_phic_cov, 0.5),
        (s.phic_var, 1.0),
    ];
    DensityChecks {
        mass: (s.mass - 1.0).abs() <= 1e-3,
        moments: moments.iter().all(|(v, w)| (v - w).abs() <= 5e-3),
        support: s.support_violation < 1e-4,
    }
}

fn cmd_density(ctx: &Ctx, a: DensityArgs) -> Result<Outcome> {
    let spec = a.spec();
    let t0 = Instant::now();
    let set = invert_all(
        &spec,
        Outputs {
            density: true,
            dx: true,
            dy: true,
        },
    )?;
    let summary = set.density.summary();
    let checks = density_checks(&summary);
    set.density.save_binary(&ctx.path("density.grid"))?;
    if let Some(g) = &set.dx {
        g.save_binary(&ctx.path("dx.grid"))?;
    }
    if let Some(g) = &set.dy {
        g.save_binary(&ctx.path("dy.grid"))?;
    }
    if a.csv {
        let coarse = set.density.coarsen(16.min(spec.x.n / 8), 2, 2)?;
        let mut w = ctx.create("density.csv")?;
        coarse.write_csv(&mut w)?;
        w.flush()?;
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        spec: &'a GridSpec,
        summary: crate::density::GridSummary,
        resolution: crate::density::ResolutionReport,
        checks: DensityChecks,
    }
    ctx.write_json(
        "summary.json",
        &Summary {
            spec: &spec,
            summary,
            resolution: set.report,
            checks,
        },
    )?;
    ctx.manifest(&a)?;
    println!(
        "mass {:.6} xc_mean {:.6} support violation {:.2e} ({:.1?})",
        summary.mass,
        summary.xc_mean,
        summary.support_violation,
        t0.elapsed()
    );
    Ok(Outcome {
        passed: checks.mass && checks.moments && checks.support,
    })
}

fn cmd_simulate(ctx: &Ctx, a: SimulateArgs) -> Result<Outcome> {
    let n = a.samples.unwrap_or(100_000) as usize;
    let steps = a.steps.unwrap_or(128);
    let seed = a.seed.unwrap_or(1);
    let (kind, passed) = match a.t {
        None => {
            let xs = xi_batch(n, steps, seed)?;
            let worst = xs.iter().map(|s| s.support_slack()).fold(f64::INFINITY, f64::min);
            let pts: Vec<MicroPoint> = xs.iter().map(|s| s.as_micro()).collect();
            write_micro_csv(File::create(ctx.path("samples.csv"))?, &pts)?;
            println!("{n} samples of the limit variable; min support slack {worst:.3e}");
            ("xi", worst >= -1e-9)
        }
        Some(t) if a.rescale => {
            let pts = micro_batch(t, n, steps, seed, Point::ORIGIN)?;
            write_micro_csv(File::create(ctx.path("samples.csv"))?, &pts)?;
            println!("{n} rescaled endpoints at t = {t}");
            ("micro", true)
        }
        Some(t) => {
            let pts: Vec<Point> = (0..n as u64)
                .into_par_iter()
                .map(|i| sample_path(t, steps, SeedSpec::new(seed, i), Point::ORIGIN).map(|p| *p.p.last().expect("path has nodes")))
                .collect::<Result<_>>()?;
            write_macro_csv(File::create(ctx.path("samples.csv"))?, &pts)?;
            println!("{n} endpoints at t = {t}");
            ("macro", true)
        }
    };
    SampleManifest {
        kind: kind.into(),
        master_seed: seed,
        stream_count: n as u64,
        n_steps: steps,
        t: a.t,
        version: env!("CARGO_PKG_VERSION").into(),
    }
    .write(&ctx.path("samples.json"))?;
    ctx.manifest(&a)?;
    Ok(Outcome { passed })
}

fn load_or_build_grids(dir: Option<&Path>) -> Result<GridKernel> {
    match dir {
        Some(d) => GridKernel::new(
            DensityGrid::load_binary(&d.join("density.grid"))?,
            DensityGrid::load_binary(&d.join("dx.grid"))?,
            DensityGrid::load_binary(&d.join("dy.grid"))?,
        ),
        None => {
            let set = invert_all(
                &GridSpec::default(),
                Outputs {
                    density: true,
                    dx: true,
                    dy: true,
                },
            )?;
            let (dx, dy) = (set.dx.expect("requested"), set.dy.expect("requested"));
            GridKernel::new(set.density, dx, dy)
        }
    }
}

/// Leading-term and first-correction sup norms across `ladder` with fitted orders.
#[derive(Debug, Clone, Serialize)]
pub struct OrderLadder {
    pub t: Vec<f64>,
    pub leading: Vec<f64>,
    pub correction: Vec<f64>,
    pub leading_order: f64,
    pub correction_order: f64,
}

pub fn order_ladder(grids: &GridKernel, ladder: &[f64], quad: &CorrectionQuadrature) -> Result<OrderLadder> {
    let out = default_correction_spec();
    let mut corr = Vec::with_capacity(ladder.len());
    for &t in ladder {
        corr.push(first_correction(t.sqrt(), &out, grids, quad)?.macro_sup_norm());
    }
    let lead: Vec<f64> = ladder.iter().map(|&t| leading_sup_norm(t, &grids.density)).collect();
    let pairs = |v: &[f64]| ladder.iter().copied().zip(v.iter().copied()).collect::<Vec<_>>();
    Ok(OrderLadder {
        leading_order: order_fit(&pairs(&lead))?,
        correction_order: order_fit(&pairs(&corr))?,
        t: ladder.to_vec(),
        leading: lead,
        correction: corr,
    })
}

fn cmd_correction(ctx: &Ctx, a: CorrectionArgs) -> Result<Outcome> {
    let tau = a.tau.unwrap_or(0.3);
    let ladder = a.ladder.clone().unwrap_or_else(|| vec![0.04, 0.09, 0.16, 0.25]);
    let quad = CorrectionQuadrature {
        sigma_nodes: a.sigma_nodes.unwrap_or(CorrectionQuadrature::default().sigma_nodes),
        estimate_error: a.estimate_error,
        ..CorrectionQuadrature::default()
    };
    let grids = load_or_build_grids(a.grids.as_deref())?;
    let c = first_correction(tau, &default_correction_spec(), &grids, &quad)?;
    c.grid.save_binary(&ctx.path("correction.grid"))?;
    let mut w = ctx.create("correction.csv")?;
    c.grid.write_csv(&mut w)?;
    w.flush()?;
    let lad = order_ladder(&grids, &ladder, &CorrectionQuadrature { estimate_error: false, ..quad })?;
    let passed = (lad.correction_order + 3.0).abs() <= 0.2 && (lad.leading_order + 4.0).abs() <= 0.05;
    #[derive(Serialize)]
    struct Summary<'a> {
        tau: f64,
        report: &'a crate::duhamel::CorrectionReport,
        max_abs: f64,
        macro_sup_norm: f64,
        ladder: &'a OrderLadder,
        passed: bool,
    }
    ctx.write_json(
        "correction.json",
        &Summary {
            tau,
            report: &c.report,
            max_abs: c.grid.max_abs(),
            macro_sup_norm: c.macro_sup_norm(),
            ladder: &lad,
            passed,
        },
    )?;
    ctx.manifest(&a)?;
    println!("fitted order of the first correction: {:.4}", lad.correction_order);
    println!("fitted order of the leading term: {:.4}", lad.leading_order);
    Ok(Outcome { passed })
}

fn cmd_ldp(ctx: &Ctx, a: LdpArgs) -> Result<Outcome> {
    let [x, y, phi] = a.point.unwrap_or([0.0, 0.0, std::f64::consts::TAU]);
    let opts = LdpOptions {
        n: a.n.unwrap_or(256),
        starts: a.starts.unwrap_or(8),
        ..LdpOptions::default()
    };
    let p = Point::new(x, y, phi);
    let r = i_meso(p, &opts)?;
    #[derive(Serialize)]
    struct Out<'a> {
        point: [f64; 3],
        macro_rate: Rate,
        result: &'a crate::ldp::RateResult,
    }
    ctx.write_json(
        "rate.json",
        &Out {
            point: [x, y, phi],
            macro_rate: i_macro(p),
            result: &r,
        },
    )?;
    if let Some(c) = &r.curve {
        let mut w = ctx.create("curve.csv")?;
        c.write_csv(&mut w)?;
        w.flush()?;
    }
    ctx.manifest(&a)?;
    match r.value {
        Rate::Finite(v) => println!("I_meso = {v:.10} (certified: {})", r.certified),
        Rate::Infinite => println!("I_meso = +inf"),
    }
    Ok(Outcome { passed: r.certified })
}

fn cmd_pendulum(ctx: &Ctx, a: PendulumArgs) -> Result<Outcome> {
    let tol = a.tol.unwrap_or(1e-8);
    let s = pendulum_shoot(tol, a.n.unwrap_or(256))?;
    let meso = if a.no_compare {
        None
    } else {
        i_meso(Point::ORIGIN, &LdpOptions::default())?.value.value()
    };
    #[derive(Serialize)]
    struct Out<'a> {
        solution: &'a crate::ldp::PendulumSolution,
        meso_rate_at_origin: Option<f64>,
        difference: Option<f64>,
        note: &'static str,
    }
    ctx.write_json(
        "pendulum.json",
        &Out {
            solution: &s,
            meso_rate_at_origin: meso,
            difference: meso.map(|m| s.energy - m),
            note: "conjectural optimiser for closed curves",
        },
    )?;
    let mut w = ctx.create("curve.csv")?;
    s.curve.write_csv(&mut w)?;
    w.flush()?;
    ctx.manifest(&a)?;
    println!("pendulum (conjectural): a = {:.10} b = {:.10} energy = {:.10}", s.a, s.b, s.energy);
    if let Some(m) = meso {
        println!("variational rate at the origin: {m:.10}");
    }
    Ok(Outcome { passed: true })
}

/// Invariant suite of one subcommand's module, at reduced sizes.
pub fn check_suite(name: &str) -> Vec<CheckLine> {
    match name {
        "charfn" => check_charfn(),
        "density" => check_density(),
        "simulate" => check_simulate(),
        "correction" => check_correction(),
        "ldp" => check_ldp(),
        "pendulum" => check_pendulum(),
        _ => vec![CheckLine::new(name, false, "no such suite".into())],
    }
}

pub fn check_all() -> Vec<CheckLine> {
    ["charfn", "density", "simulate", "correction", "ldp", "pendulum"]
        .iter()
        .flat_map(|n| check_suite(n))
        .collect()
}

fn check_charfn() -> Vec<CheckLine> {
    let v = axis_values(-10.0, 10.0, 41);
    let g = v
        .iter()
        .flat_map(|&m| v.iter().map(move |&n| (m, n)))
        .map(|(m, n)| (closed_form(FreqPoint::new(0.0, m, n)) - gaussian_slice(m, n)).norm())
        .fold(0.0f64, f64::max);
    let axis = axis_values(-10.0, 10.0, 5);
    let cmp = compare_grid(&axis, &axis, &axis, 5e-7, 1024);
    let origin = (closed_form(FreqPoint::ORIGIN) - 1.0).norm() + (product_form(FreqPoint::ORIGIN, 100) - 1.0).norm();
    let q = FreqPoint::new(3.0, -2.0, 1.5);
    let conj = (closed_form(q.neg()) - closed_form(q).conj()).norm();
    vec![
        CheckLine::new("charfn gaussian slice", g <= 1e-12, format!("max error {g:.2e}")),
        CheckLine::new("charfn closed vs product", cmp.max_disagreement < 1e-6, format!("max {:.2e}", cmp.max_disagreement)),
        CheckLine::new("charfn origin", origin == 0.0, format!("{origin:.1e}")),
        CheckLine::new("charfn conjugate symmetry", conj <= 1e-14, format!("{conj:.1e}")),
    ]
}

fn small_density_spec() -> GridSpec {
    let mut s = GridSpec::with_axes(Axis::new(-4.5, 0.5, 256), Axis::new(-4.5, 4.5, 32), Axis::new(-4.5, 4.5, 32));
    s.cutoffs.lambda = 400.0;
    s.tolerance = 1.0;
    s
}

fn check_density() -> Vec<CheckLine> {
    let spec = small_density_spec();
    let g = match invert_all(
        &spec,
        Outputs {
            density: true,
            dx: false,
            dy: false,
        },
    ) {
        Ok(s) => s.density,
        Err(e) => return vec![CheckLine::new("density grid", false, e.to_string())],
    };
    let s = g.summary();
    let mut sym = 0.0f64;
    for ip in 0..spec.phi.n {
        for iy in 0..spec.y.n {
            for ix in 0..spec.x.n {
                sym = sym.max((g.get(ix, iy, ip) - g.get(ix, spec.y.n - 1 - iy, spec.phi.n - 1 - ip)).abs());
            }
        }
    }
    let direct = crate::density::invert_direct(
        MicroPoint::new(-0.6, 0.2, 0.4),
        crate::density::Cutoffs {
            lambda: 10.0,
            mu: 30.0,
            nu: 30.0,
        },
        spec.steps,
    );
    let kernel = SpectralKernel::new(10.0, spec.steps.lambda).expect("valid kernel");
    let route = kernel.density(MicroPoint::new(-0.6, 0.2, 0.4));
    vec![
        CheckLine::new("density mass", (s.mass - 1.0).abs() < 1e-2, format!("{:.6}", s.mass)),
        CheckLine::new("density x mean", (s.xc_mean + 0.25).abs() < 1e-2, format!("{:.6}", s.xc_mean)),
        CheckLine::new("density phi marginal", s.phi_marginal_error < 1e-3, format!("{:.2e}", s.phi_marginal_error)),
        CheckLine::new("density reflection symmetry", sym < 1e-12, format!("{sym:.1e}")),
        CheckLine::new("density two routes", (direct - route).abs() < 1e-8, format!("{:.1e}", (direct - route).abs())),
    ]
}

fn check_simulate() -> Vec<CheckLine> {
    let a = xi_batch(20_000, 64, 11);
    let b = xi_batch(20_000, 64, 11);
    match (a, b) {
        (Ok(a), Ok(b)) => {
            let slack = a.iter().map(|s| s.support_slack()).fold(f64::INFINITY, f64::min);
            let m = a.iter().map(|s| s.xi_x).sum::<f64>() / a.len() as f64;
            let v = a.iter().map(|s| s.xi_phi * s.xi_phi).sum::<f64>() / a.len() as f64;
            vec![
                CheckLine::new("simulate support inequality", slack >= -1e-9, format!("min slack {slack:.2e}")),
                CheckLine::new("simulate determinism", a == b, String::new()),
                CheckLine::new("simulate x mean", (m + 0.25).abs() < 0.01, format!("{m:.4}")),
                CheckLine::new("simulate phi variance", (v - 1.0).abs() < 0.05, format!("{v:.4}")),
            ]
        }
        (Err(e), _) | (_, Err(e)) => vec![CheckLine::new("simulate", false, e.to_string())],
    }
}

fn check_correction() -> Vec<CheckLine> {
    let ts = [0.04f64, 0.09, 0.16, 0.25];
    let exact: Vec<(f64, f64)> = ts.iter().map(|&t| (t, 3.0 * t.powi(-3))).collect();
    let fit = order_fit(&exact).unwrap_or(f64::NAN);
    let k = SpectralKernel::new(20000.0, 0.5).expect("valid kernel");
    let p = MicroPoint::new(-0.5, 0.3, 0.8);
    let e = error_term(0.3, p, &k).unwrap_or(f64::NAN);
    let fd = residual_by_differences(&k, 0.3, p, 3e-4).unwrap_or(f64::NAN);
    let zero = error_term(0.3, MicroPoint::new(-0.5, 0.3, 0.0), &k).unwrap_or(f64::NAN);
    vec![
        CheckLine::new("correction order fit", (fit + 3.0).abs() < 1e-12, format!("{fit:.12}")),
        CheckLine::new(
            "correction error term vs differences",
            (e - fd).abs() <= 5e-3 * e.abs(),
            format!("{e:.6e} vs {fd:.6e}"),
        ),
        CheckLine::new("correction error term at phi = 0", zero == 0.0, format!("{zero}")),
    ]
}

fn check_ldp() -> Vec<CheckLine> {
    use std::f64::consts::PI;
    let opts = LdpOptions {
        n: 128,
        ..LdpOptions::default()
    };
    let mut out = vec![CheckLine::new(
        "ldp macro table",
        i_macro(Point::new(0.0, 0.0, 2.0)) == Rate::Finite(2.0) && i_macro(Point::new(0.5, 0.0, 0.0)) == Rate::Infinite,
        String::new(),
    )];
    let rest = i_meso(Point::new(1.0, 0.0, 0.0), &opts).ok().and_then(|r| r.value.value());
    out.push(CheckLine::new("ldp rest point", rest.is_some_and(|v| v.abs() < 1e-6), format!("{rest:?}")));
    let far = i_meso(Point::new(0.0, 1.2, 0.0), &opts).map(|r| r.value);
    out.push(CheckLine::new("ldp outside unit disc", matches!(far, Ok(Rate::Infinite)), String::new()));
    let half = i_meso(Point::new(0.0, 2.0 / PI, PI), &opts).ok().and_then(|r| r.value.value());
    out.push(CheckLine::new(
        "ldp constant curvature",
        half.is_some_and(|v| (v - PI * PI / 2.0).abs() < 1e-2),
        format!("{half:?}"),
    ));
    out
}

fn check_pendulum() -> Vec<CheckLine> {
    match pendulum_shoot(1e-8, 256) {
        Ok(s) => vec![
            CheckLine::new(
                "pendulum residuals",
                s.residuals.iter().all(|r| r.abs() < 1e-8),
                format!("{:?}", s.residuals),
            ),
            CheckLine::new(
                "pendulum energy bound",
                s.energy >= 2.0 * std::f64::consts::PI.powi(2) - 1e-2,
                format!("{:.8}", s.energy),
            ),
        ],
        Err(e) => vec![CheckLine::new("pendulum", false, e.to_string())],
    }
}
