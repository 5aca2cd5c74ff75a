//! Coordinate transforms between the sensor Cartesian frame and
//! perspective-view frames (spherical or cylindrical) with an arbitrary origin.
//!
//! A perspective view whose origin sits at the sensor is egocentric; moving
//! the origin elsewhere imitates an observer at that location. Both cases go
//! through the same translate-then-convert path.

use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("cartesian views do not transform; use the point coordinates directly")]
    CartesianView,
    #[error("non-finite coordinate {0:?}")]
    NonFinite([f64; 3]),
    #[error("view coordinate violates its invariants: {0}")]
    InvalidViewCoord(&'static str),
    #[error("cartesian view must sit at the sensor origin, got {0:?}")]
    CartesianOrigin([f64; 3]),
}

/// A point in the sensor Cartesian frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

impl Sub for Point3 {
    type Output = Point3;

    fn sub(self, other: Point3) -> Point3 {
        Point3::new(self.x - other.x, self.y - other.y, self.z - other.z)
    }
}

impl Add for Point3 {
    type Output = Point3;

    fn add(self, other: Point3) -> Point3 {
        Point3::new(self.x + other.x, self.y + other.y, self.z + other.z)
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }
}

impl From<Point3> for [f64; 3] {
    fn from(p: Point3) -> Self {
        p.to_array()
    }
}

/// Coordinates of a point in a perspective view.
///
/// `phi` is the polar angle in radians for spherical views and the height
/// above the view origin in meters for cylindrical views.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ViewCoord {
    pub r: f64,
    pub theta: f64,
    pub phi: f64,
}

impl ViewCoord {
    pub const fn new(r: f64, theta: f64, phi: f64) -> Self {
        Self { r, theta, phi }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.r, self.theta, self.phi]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Cartesian,
    Spherical,
    Cylindrical,
}

/// One view's coordinate frame: its kind and where its origin sits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub kind: ViewKind,
    pub origin: Point3,
}

impl ViewSpec {
    pub fn new(kind: ViewKind, origin: Point3) -> Result<Self, GeometryError> {
        let spec = Self { kind, origin };
        spec.validate()?;
        Ok(spec)
    }

    pub const fn cartesian() -> Self {
        Self { kind: ViewKind::Cartesian, origin: Point3::ORIGIN }
    }

    pub const fn spherical(origin: Point3) -> Self {
        Self { kind: ViewKind::Spherical, origin }
    }

    pub const fn cylindrical(origin: Point3) -> Self {
        Self { kind: ViewKind::Cylindrical, origin }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.origin.is_finite() {
            return Err(GeometryError::NonFinite(self.origin.to_array()));
        }
        if self.kind == ViewKind::Cartesian && self.origin != Point3::ORIGIN {
            return Err(GeometryError::CartesianOrigin(self.origin.to_array()));
        }
        Ok(())
    }

    pub fn is_egocentric(&self) -> bool {
        self.origin == Point3::ORIGIN
    }

    /// Grid-space coordinates of `p` in this view: the point itself for a
    /// cartesian view, its [`ViewCoord`] otherwise.
    pub fn grid_coords(&self, p: Point3) -> Result<[f64; 3], GeometryError> {
        match self.kind {
            ViewKind::Cartesian => {
                if p.is_finite() {
                    Ok(p.to_array())
                } else {
                    Err(GeometryError::NonFinite(p.to_array()))
                }
            }
            _ => to_view(p, self).map(|proj| proj.coord.to_array()),
        }
    }

    /// Inverse of [`ViewSpec::grid_coords`].
    pub fn cartesian_from_grid(&self, c: [f64; 3]) -> Result<Point3, GeometryError> {
        match self.kind {
            ViewKind::Cartesian => Ok(Point3::from(c)),
            _ => from_view(ViewCoord::new(c[0], c[1], c[2]), self),
        }
    }
}

/// Result of [`to_view`]. `degenerate` is set when the point coincides with
/// the view origin and the angles were filled in by convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub coord: ViewCoord,
    pub degenerate: bool,
}

/// Maps `atan2`'s `-π` (reachable through a negative zero) onto `π` so the
/// azimuth always lies in `(-π, π]`.
#[inline]
fn azimuth(dy: f64, dx: f64) -> f64 {
    let t = dy.atan2(dx);
    if t == -PI {
        PI
    } else {
        t
    }
}

/// Converts a Cartesian point into the coordinates of a spherical or
/// cylindrical view.
pub fn to_view(p: Point3, view: &ViewSpec) -> Result<Projection, GeometryError> {
    if !p.is_finite() {
        return Err(GeometryError::NonFinite(p.to_array()));
    }
    let d = p - view.origin;
    let degenerate = d.x == 0.0 && d.y == 0.0 && d.z == 0.0;
    let coord = match view.kind {
        ViewKind::Cartesian => return Err(GeometryError::CartesianView),
        ViewKind::Spherical => {
            if degenerate {
                ViewCoord::new(0.0, 0.0, FRAC_PI_2)
            } else {
                let r = d.norm();
                // Rounding can push the cosine a hair outside [-1, 1].
                let cos_phi = (d.z / r).clamp(-1.0, 1.0);
                ViewCoord::new(r, azimuth(d.y, d.x), cos_phi.acos())
            }
        }
        ViewKind::Cylindrical => {
            if degenerate {
                ViewCoord::new(0.0, 0.0, 0.0)
            } else {
                ViewCoord::new(d.x.hypot(d.y), azimuth(d.y, d.x), d.z)
            }
        }
    };
    Ok(Projection { coord, degenerate })
}

/// Analytic inverse of [`to_view`].
pub fn from_view(c: ViewCoord, view: &ViewSpec) -> Result<Point3, GeometryError> {
    let ViewCoord { r, theta, phi } = c;
    if !(r.is_finite() && theta.is_finite() && phi.is_finite()) {
        return Err(GeometryError::NonFinite(c.to_array()));
    }
    if r < 0.0 {
        return Err(GeometryError::InvalidViewCoord("negative range"));
    }
    if !(theta > -PI && theta <= PI) {
        return Err(GeometryError::InvalidViewCoord("azimuth outside (-pi, pi]"));
    }
    let o = view.origin;
    match view.kind {
        ViewKind::Cartesian => Err(GeometryError::CartesianView),
        ViewKind::Spherical => {
            if !(0.0..=PI).contains(&phi) {
                return Err(GeometryError::InvalidViewCoord("polar angle outside [0, pi]"));
            }
            let (sp, cp) = phi.sin_cos();
            let (st, ct) = theta.sin_cos();
            Ok(Point3::new(o.x + r * sp * ct, o.y + r * sp * st, o.z + r * cp))
        }
        ViewKind::Cylindrical => {
            let (st, ct) = theta.sin_cos();
            Ok(Point3::new(o.x + r * ct, o.y + r * st, o.z + phi))
        }
    }
}
