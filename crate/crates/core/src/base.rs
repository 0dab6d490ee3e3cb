//! The hand-designed base system.
//!
//! In polar coordinates on the `(x, z)` plane with an extra attractor on the
//! surface normal `y`:
//!
//! ```text
//! dr/dt = mu (1 - r²/R²) r      dω/dt = 1      dy/dt = -alpha_y y
//! ```
//!
//! Every trajectory with `r > 0` converges to the circle `x² + z² = R²`,
//! `y = 0`, traversed counter-clockwise in the `(x, z)` plane with period 2π.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::math;
use crate::points::PointSet2;

/// Rates of the base system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseParams {
    mu: f64,
    alpha_y: f64,
    radius: f64,
}

impl BaseParams {
    pub fn new(mu: f64, alpha_y: f64, radius: f64) -> Result<Self> {
        for (name, v) in [("mu", mu), ("alpha_y", alpha_y), ("radius", radius)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::arg(alloc::format!("{name} must be positive and finite")));
            }
        }
        Ok(Self { mu, alpha_y, radius })
    }

    /// Radial convergence rate.
    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Convergence rate towards the surface.
    pub fn alpha_y(&self) -> f64 {
        self.alpha_y
    }

    /// Limit-cycle radius.
    pub fn radius(&self) -> f64 {
        self.radius
    }
}

impl Default for BaseParams {
    fn default() -> Self {
        Self { mu: 1.0, alpha_y: 1.0, radius: 1.0 }
    }
}

/// End-effector position; `y` is the surface normal.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct State3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl State3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("state"))
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// The in-plane coordinates `(x, z)`.
    pub fn plane(&self) -> [f64; 2] {
        [self.x, self.z]
    }

    pub fn distance(&self, other: &State3) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        math::sqrt(dx * dx + dy * dy + dz * dz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Velocity3 {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Velocity3 {
    pub const fn new(dx: f64, dy: f64, dz: f64) -> Self {
        Self { dx, dy, dz }
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.dz.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarRates {
    pub dr: f64,
    pub domega: f64,
    pub dy: f64,
}

pub fn base_dynamics_polar(r: f64, omega: f64, y: f64, p: &BaseParams) -> Result<PolarRates> {
    if !(r.is_finite() && omega.is_finite() && y.is_finite()) {
        return Err(Error::NonFinite("polar state"));
    }
    if r < 0.0 {
        return Err(Error::arg("polar radius must be non-negative"));
    }
    let r2 = p.radius * p.radius;
    Ok(PolarRates {
        dr: p.mu * (1.0 - r * r / r2) * r,
        domega: 1.0,
        dy: -p.alpha_y * y,
    })
}

pub fn base_dynamics_cartesian(s: &State3, p: &BaseParams) -> Result<Velocity3> {
    s.check()?;
    Ok(base_velocity(s, p))
}

/// Unchecked Cartesian base field, for inner loops that validated already.
#[inline]
pub(crate) fn base_velocity(s: &State3, p: &BaseParams) -> Velocity3 {
    let radial = p.mu * (1.0 - (s.x * s.x + s.z * s.z) / (p.radius * p.radius));
    Velocity3 {
        dx: -s.z + radial * s.x,
        dy: -p.alpha_y * s.y,
        dz: s.x + radial * s.z,
    }
}

/// `k` equally spaced points on the base limit cycle, starting at angle 0
/// and increasing counter-clockwise.
pub fn sample_base_cycle(k: usize, p: &BaseParams) -> Result<PointSet2> {
    if k < 3 {
        return Err(Error::arg("cycle needs at least 3 samples"));
    }
    let points: Vec<[f64; 2]> = (0..k)
        .map(|i| {
            let theta = 2.0 * PI * i as f64 / k as f64;
            [p.radius * math::cos(theta), p.radius * math::sin(theta)]
        })
        .collect();
    PointSet2::new(points)
}
