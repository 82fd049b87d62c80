use kbm::density::{invert_all, Axis, GridSet, GridSpec, Outputs};
use kbm::scaling::MicroPoint;

fn inversion(spec: &GridSpec) -> GridSet {
    invert_all(
        spec,
        Outputs {
            density: true,
            dx: true,
            dy: true,
        },
    )
    .unwrap()
}

fn full_box() -> GridSet {
    let mut spec = GridSpec::with_axes(Axis::new(-3.5, 0.5, 2048), Axis::new(-3.5, 3.5, 64), Axis::new(-4.0, 4.0, 32));
    spec.cutoffs.lambda = 6000.0;
    spec.tolerance = 1.0;
    inversion(&spec)
}

/// Small box refined along one axis.
fn strip(x: Axis, y: Axis) -> GridSet {
    let mut spec = GridSpec::with_axes(x, y, Axis::new(-1.0, 1.0, 8));
    spec.cutoffs.lambda = 6000.0;
    spec.tolerance = 1.0;
    inversion(&spec)
}

/// Fourth-order central difference of `f` on unit-spaced samples.
fn d4(f: impl Fn(isize) -> f64, h: f64) -> f64 {
    (f(-2) - 8.0 * f(-1) + 8.0 * f(1) - f(2)) / (12.0 * h)
}

/// The strip keeps `-2x - y^2 >= 0.35`, clear of the sharp layer at the edge.
#[test]
fn x_gradient_matches_differences() {
    let set = strip(Axis::new(-1.5, -0.3, 512), Axis::new(-0.5, 0.5, 16));
    let (u, gx) = (&set.density, set.dx.as_ref().unwrap());
    let s = u.spec;
    let mut err = 0.0f64;
    for ip in 0..s.phi.n {
        for iy in 0..s.y.n {
            for ix in 2..s.x.n - 2 {
                let fd = d4(|k| u.get((ix as isize + k) as usize, iy, ip), s.x.step());
                err = err.max((fd - gx.get(ix, iy, ip)).abs());
            }
        }
    }
    assert!(err < 2e-3, "x gradient {err:e}");
}

/// Differences in y lose accuracy in the sharp layer at the support edge, so
/// nodes with `-2x - y^2 < 0.2` are skipped.
#[test]
fn y_gradient_matches_differences_off_the_edge() {
    let set = strip(Axis::new(-1.5, -0.5, 16), Axis::new(-1.5, 1.5, 1024));
    let (u, gy) = (&set.density, set.dy.as_ref().unwrap());
    let s = u.spec;
    let mut err = 0.0f64;
    for ip in 0..s.phi.n {
        for iy in 2..s.y.n - 2 {
            for ix in 0..s.x.n {
                let n = s.node(ix, iy, ip);
                if -2.0 * n.x - n.y * n.y < 0.2 {
                    continue;
                }
                let fd = d4(|k| u.get(ix, (iy as isize + k) as usize, ip), s.y.step());
                err = err.max((fd - gy.get(ix, iy, ip)).abs());
            }
        }
    }
    assert!(err < 2e-3, "y gradient {err:e}");
}

#[test]
fn gradient_symmetries_and_integrals() {
    let set = full_box();
    let (u, gx, gy) = (&set.density, set.dx.as_ref().unwrap(), set.dy.as_ref().unwrap());
    let s = u.spec;
    let scale = gy.max_abs();
    let mut odd = 0.0f64;
    for ip in 0..s.phi.n {
        for iy in 0..s.y.n {
            for ix in 0..s.x.n {
                let a = gy.get(ix, iy, ip);
                let b = gy.get(ix, s.y.n - 1 - iy, s.phi.n - 1 - ip);
                odd = odd.max((a + b).abs());
            }
        }
    }
    assert!(odd <= 1e-12 * scale, "odd symmetry {odd:e}");

    assert!(gx.integral().abs() < 1e-3, "{}", gx.integral());
    assert!(gy.integral().abs() < 1e-3, "{}", gy.integral());
    assert!((u.integral() - 1.0).abs() < 1e-2);

    // even symmetry of the density through interpolation
    let p = MicroPoint::new(-0.83, 0.21, 0.47);
    let a = u.eval(p).unwrap();
    let b = u.eval(MicroPoint::new(p.x, -p.y, -p.phi)).unwrap();
    assert!((a - b).abs() < 1e-10, "{a} {b}");
    assert!(u.eval(MicroPoint::new(1.0, 0.0, 0.0)).is_err());
}
