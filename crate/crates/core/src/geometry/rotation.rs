use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

/// Below this imaginary-part norm the quaternion log switches to its series form.
const SMALL_ANGLE: f64 = 1e-12;

/// A 3D rotation stored as a unit quaternion (w, x, y, z).
///
/// Every constructor and composition renormalizes, so long chains of
/// compositions stay on the unit sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    q: UnitQuaternion<f64>,
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            q: UnitQuaternion::identity(),
        }
    }

    /// Builds a rotation from raw quaternion coefficients, normalizing them.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self {
            q: UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)),
        }
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self::from_wxyz(q.w, q.i, q.j, q.k)
    }

    /// Projects an (approximately) orthonormal matrix onto SO(3).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Self::from_unit_quaternion(UnitQuaternion::from_matrix_eps(
            m,
            1e-15,
            256,
            UnitQuaternion::identity(),
        ))
    }

    /// Exponential map from an axis-angle vector.
    pub fn exp(omega: &Vector3<f64>) -> Self {
        let theta_sq = omega.norm_squared();
        let theta = theta_sq.sqrt();
        let (w, k) = if theta < 1e-4 {
            // cos(θ/2) and sin(θ/2)/θ to fourth order
            let w = 1.0 - theta_sq / 8.0 + theta_sq * theta_sq / 384.0;
            let k = 0.5 - theta_sq / 48.0 + theta_sq * theta_sq / 3840.0;
            (w, k)
        } else {
            let half = 0.5 * theta;
            (half.cos(), half.sin() / theta)
        };
        Self::from_wxyz(w, k * omega.x, k * omega.y, k * omega.z)
    }

    /// Logarithm map to an axis-angle vector with angle in [0, π].
    ///
    /// Uses `atan2` on the quaternion, which stays well conditioned both at
    /// zero angle and near π where matrix-based formulas divide by sin θ.
    pub fn log(&self) -> Vector3<f64> {
        let (mut w, mut v) = (self.q.w, self.q.imag());
        if w < 0.0 {
            w = -w;
            v = -v;
        }
        let n = v.norm();
        if n < SMALL_ANGLE {
            // θ ≈ 2n, axis·θ ≈ 2v/w (1 - n²/(3w²))
            return v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w));
        }
        let theta = 2.0 * n.atan2(w);
        v * (theta / n)
    }

    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    pub fn inverse(&self) -> Self {
        Self {
            q: self.q.inverse(),
        }
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self::from_unit_quaternion(self.q * other.q)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.q.transform_vector(v)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.q.to_rotation_matrix().into_inner()
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.q
    }

    /// (w, x, y, z)
    pub fn wxyz(&self) -> [f64; 4] {
        [self.q.w, self.q.i, self.q.j, self.q.k]
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
