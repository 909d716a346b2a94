//! Lie-group arithmetic, unit rays and robust-loss primitives shared by every solver.

mod rotation;
mod sim3;
mod umeyama;

pub use rotation::{skew, Rotation};
pub use sim3::{Matrix7, Sim3, Tangent, Vector7};
pub use umeyama::umeyama;

use nalgebra::Vector3;
use thiserror::Error;

/// Points closer than this to the camera centre carry no direction.
pub const RAY_EPSILON: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point norm {0:e} is below the ray threshold")]
    InvalidPoint(f64),
    #[error("degenerate point configuration for alignment: {0}")]
    Degenerate(&'static str),
}

/// A unit-norm direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitRay(Vector3<f64>);

impl UnitRay {
    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Vector3<f64> {
        self.0
    }

    /// Wraps a vector already known to be unit length.
    pub fn new_unchecked(v: Vector3<f64>) -> Self {
        Self(v)
    }
}

pub fn normalize_ray(x: &Vector3<f64>) -> Result<UnitRay, GeometryError> {
    let n = x.norm();
    if !(n > RAY_EPSILON) {
        return Err(GeometryError::InvalidPoint(n));
    }
    Ok(UnitRay(x / n))
}

/// Squared chord between two unit rays, `‖ψ1 − ψ2‖² = 2(1 − cos θ)`.
pub fn ray_sq_error(a: &UnitRay, b: &UnitRay) -> f64 {
    (a.0 - b.0).norm_squared()
}

/// Huber loss and the matching IRLS weight `ρ'(r)/r`.
pub fn huber(r: f64, delta: f64) -> (f64, f64) {
    debug_assert!(delta > 0.0);
    let a = r.abs();
    if a <= delta {
        (0.5 * r * r, 1.0)
    } else {
        (delta * (a - 0.5 * delta), delta / a)
    }
}
