//! Rotation frames, anisotropic dilations and the microscopic/macroscopic
//! coordinate maps.
//!
//! A macroscopic state `p = (x, y, phi)` is related to a microscopic state
//! `p̌` around a base point `p0` by
//!
//! ```text
//! P_{tau,p0}(p̌) = p0 + tau^2 X(p0) + M_{p0} T_tau p̌,    T_tau = diag(tau^4, tau^3, tau)
//! ```
//!
//! where `M_p` is the rotation by `phi` in the plane and `X(p)` its first
//! column. Angles are unwrapped reals throughout.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A state of the diffusion in macroscopic coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
}

/// A state in microscopic (rescaled) coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MicroPoint {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0, phi: 0.0 };

    pub fn new(x: f64, y: f64, phi: f64) -> Self {
        Point { x, y, phi }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.phi)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Point { x: v[0], y: v[1], phi: v[2] }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.phi.is_finite()
    }

    /// Unit vector field pointing in the direction of motion.
    pub fn heading(&self) -> Vector3<f64> {
        Vector3::new(self.phi.cos(), self.phi.sin(), 0.0)
    }
}

impl MicroPoint {
    pub const ORIGIN: MicroPoint = MicroPoint { x: 0.0, y: 0.0, phi: 0.0 };

    pub fn new(x: f64, y: f64, phi: f64) -> Self {
        MicroPoint { x, y, phi }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.phi)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        MicroPoint { x: v[0], y: v[1], phi: v[2] }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.phi.is_finite()
    }

    /// Image under the reflection `W -> -W`, i.e. `(x, y, phi) -> (x, -y, -phi)`.
    pub fn reflected(self) -> Self {
        MicroPoint { x: self.x, y: -self.y, phi: -self.phi }
    }
}

/// The orthonormal frame `M_p = (X(p) | Y(p) | Phi(p))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame(pub Matrix3<f64>);

impl Frame {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Frame {
        Frame(self.0.transpose())
    }
}

pub fn frame(p: Point) -> Frame {
    let (s, c) = p.phi.sin_cos();
    Frame(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
}

pub fn dilation(tau: f64) -> Matrix3<f64> {
    let t2 = tau * tau;
    Matrix3::from_diagonal(&Vector3::new(t2 * t2, t2 * tau, tau))
}

fn inverse_dilation(tau: f64) -> Result<Matrix3<f64>> {
    if !(tau > 0.0) {
        return Err(Error::DegenerateDilation { tau });
    }
    let t2 = tau * tau;
    Ok(Matrix3::from_diagonal(&Vector3::new(
        1.0 / (t2 * t2),
        1.0 / (t2 * tau),
        1.0 / tau,
    )))
}

/// `P_{tau,p0}(p̌) = p0 + tau^2 X(p0) + M_{p0} T_tau p̌`.
pub fn to_macro(tau: f64, p0: Point, pc: MicroPoint) -> Point {
    let m = frame(p0).0;
    let v = p0.to_vector() + tau * tau * p0.heading() + m * (dilation(tau) * pc.to_vector());
    Point::from_vector(v)
}

/// Inverse of [`to_macro`].
pub fn from_macro(tau: f64, p0: Point, p: Point) -> Result<MicroPoint> {
    let t_inv = inverse_dilation(tau)?;
    let m_inv = frame(p0).inverse().0;
    let d = p.to_vector() - p0.to_vector() - tau * tau * p0.heading();
    Ok(MicroPoint::from_vector(t_inv * (m_inv * d)))
}

/// End-point chart: the `p̌0` with `p - tau^2 X(p) + M_p T_tau p̌0 = p0`.
pub fn endpoint_from_macro(tau: f64, p: Point, p0: Point) -> Result<MicroPoint> {
    let t_inv = inverse_dilation(tau)?;
    let m_inv = frame(p).inverse().0;
    let d = p0.to_vector() - p.to_vector() + tau * tau * p.heading();
    Ok(MicroPoint::from_vector(t_inv * (m_inv * d)))
}

/// `sin(x)/x`, switching to its Taylor series near the origin.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        // 1 - x^2/3! + x^4/5! - x^6/7! + x^8/9! - x^10/11!
        1.0 - x2 / 6.0 * (1.0 - x2 / 20.0 * (1.0 - x2 / 42.0 * (1.0 - x2 / 72.0 * (1.0 - x2 / 110.0))))
    } else {
        x.sin() / x
    }
}

/// `T_tau^{-1} M_{p0}^{-1} M_p T_tau` written in terms of `phi_check = (phi - phi0)/tau`.
///
/// Smooth in `(tau, phi_check)` including `tau = 0`.
pub fn m_check(tau: f64, phi_check: f64) -> Matrix3<f64> {
    let arg = tau * phi_check;
    let (s, c) = arg.sin_cos();
    Matrix3::new(
        c,
        -sinc(arg) * phi_check,
        0.0,
        tau * s,
        c,
        0.0,
        0.0,
        0.0,
        1.0,
    )
}

/// `tau^2 T_tau^{-1} M_{p0}^{-1} (X(p) - X(p0))` in terms of `phi_check`.
pub fn x_check(tau: f64, phi_check: f64) -> Vector3<f64> {
    let arg = tau * phi_check;
    let half = sinc(0.5 * arg);
    Vector3::new(
        -0.5 * half * half * phi_check * phi_check,
        sinc(arg) * phi_check,
        0.0,
    )
}
