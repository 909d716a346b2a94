//! The similarity group Sim(3) and its Lie algebra.
//!
//! Group elements act on points as `x ↦ s·R·x + t`. Tangent vectors are
//! ordered `[ρ (3), ω (3), σ (1)]`: translational generator, axis-angle
//! rotation, and log-scale. Perturbations are applied on the left,
//! `retract(τ, T) = exp(τ) · T`.

use std::fmt;

use nalgebra::{Matrix3, Matrix4, SMatrix, SVector, Vector3};

use super::rotation::{skew, Rotation};

pub type Vector7 = SVector<f64, 7>;
pub type Matrix7 = SMatrix<f64, 7, 7>;

/// An element of the Lie algebra sim(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tangent(pub Vector7);

impl Tangent {
    pub fn zero() -> Self {
        Self(Vector7::zeros())
    }

    pub fn new(rho: Vector3<f64>, omega: Vector3<f64>, sigma: f64) -> Self {
        Self(Vector7::from_column_slice(&[
            rho.x, rho.y, rho.z, omega.x, omega.y, omega.z, sigma,
        ]))
    }

    pub fn from_slice(v: &[f64; 7]) -> Self {
        Self(Vector7::from_column_slice(v))
    }

    pub fn rho(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn omega(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn sigma(&self) -> f64 {
        self.0[6]
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// A similarity transform: positive scale, rotation and translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3 {
    scale: f64,
    rotation: Rotation,
    translation: Vector3<f64>,
}

impl Default for Sim3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for Sim3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation.wxyz();
        let t = self.translation;
        write!(
            f,
            "Sim3(s: {:.6}, q: [{:.6}, {:.6}, {:.6}, {:.6}], t: [{:.6}, {:.6}, {:.6}])",
            self.scale, q[0], q[1], q[2], q[3], t.x, t.y, t.z
        )
    }
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// # Panics
    /// If `scale` is not a finite positive number.
    pub fn new(scale: f64, rotation: Rotation, translation: Vector3<f64>) -> Self {
        assert!(
            scale.is_finite() && scale > 0.0,
            "Sim3 scale must be positive, got {scale}"
        );
        Self {
            scale,
            rotation,
            translation,
        }
    }

    pub fn from_rotation_translation(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self::new(1.0, rotation, translation)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(1.0, Rotation::identity(), translation)
    }

    /// Reads the `s, qw, qx, qy, qz, tx, ty, tz` layout used by the submap container.
    pub fn from_array(v: &[f64; 8]) -> Self {
        Self::new(
            v[0],
            Rotation::from_wxyz(v[1], v[2], v[3], v[4]),
            Vector3::new(v[5], v[6], v[7]),
        )
    }

    pub fn to_array(&self) -> [f64; 8] {
        let q = self.rotation.wxyz();
        let t = self.translation;
        [self.scale, q[0], q[1], q[2], q[3], t.x, t.y, t.z]
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Rotation {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn is_finite(&self) -> bool {
        self.scale.is_finite()
            && self.scale > 0.0
            && self.translation.iter().all(|v| v.is_finite())
            && self.rotation.wxyz().iter().all(|v| v.is_finite())
    }

    /// `s·R·x + t`
    pub fn act(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(x) * self.scale + self.translation
    }

    pub fn compose(&self, other: &Sim3) -> Sim3 {
        Sim3 {
            scale: self.scale * other.scale,
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) * self.scale + self.translation,
        }
    }

    pub fn inverse(&self) -> Sim3 {
        let inv_rot = self.rotation.inverse();
        let inv_scale = 1.0 / self.scale;
        Sim3 {
            scale: inv_scale,
            rotation: inv_rot,
            translation: -inv_rot.rotate(&self.translation) * inv_scale,
        }
    }

    /// 4×4 homogeneous matrix `[sR t; 0 1]`.
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.rotation.matrix() * self.scale));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn exp(tau: &Tangent) -> Sim3 {
        let omega = tau.omega();
        let sigma = tau.sigma();
        let w = left_jacobian_w(&omega, sigma);
        Sim3 {
            scale: sigma.exp(),
            rotation: Rotation::exp(&omega),
            translation: w * tau.rho(),
        }
    }

    pub fn log(&self) -> Tangent {
        let omega = self.rotation.log();
        let sigma = self.scale.ln();
        let w = left_jacobian_w(&omega, sigma);
        let rho = w
            .lu()
            .solve(&self.translation)
            .expect("Sim3 W matrix is invertible for finite tangents");
        Tangent::new(rho, omega, sigma)
    }

    /// `exp(τ) · T`
    pub fn retract(tau: &Tangent, t: &Sim3) -> Sim3 {
        Sim3::exp(tau).compose(t)
    }

    /// Adjoint in the `[ρ, ω, σ]` ordering, so that
    /// `T · exp(τ) · T⁻¹ = exp(Ad(T) τ)`.
    pub fn adjoint(&self) -> Matrix7 {
        let r = self.rotation.matrix();
        let t = self.translation;
        let mut ad = Matrix7::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r * self.scale));
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(&t) * r));
        ad.fixed_view_mut::<3, 1>(0, 6).copy_from(&(-t));
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad[(6, 6)] = 1.0;
        ad
    }
}

/// Upper bound on `|σ|` for which the power series of the moments is used.
const MOMENT_SERIES_LIMIT: f64 = 8.0;
/// Number of θ² terms kept in the small-angle expansion.
const THETA_TERMS: usize = 9;

/// `∫₀¹ uᵏ e^{σu} du` for k = 0..=kmax.
fn exp_moments(sigma: f64, kmax: usize) -> Vec<f64> {
    let mut m = vec![0.0; kmax + 1];
    if sigma.abs() <= MOMENT_SERIES_LIMIT {
        for (k, mk) in m.iter_mut().enumerate() {
            let mut term = 1.0; // σⁿ/n!
            let mut sum = 0.0;
            for n in 0..80 {
                let add = term / (n + k + 1) as f64;
                sum += add;
                if add.abs() < 1e-18 * sum.abs() && n > 2 {
                    break;
                }
                term *= sigma / (n + 1) as f64;
            }
            *mk = sum;
        }
    } else {
        let e = sigma.exp();
        m[0] = (e - 1.0) / sigma;
        for k in 1..=kmax {
            m[k] = (e - k as f64 * m[k - 1]) / sigma;
        }
    }
    m
}

/// The matrix `W = ∫₀¹ e^{σu} exp(u[ω]×) du` mapping ρ to the translation
/// of `exp(τ)`. Written as `a0·I + a1·[ω]× + a2·[ω]×²`.
fn left_jacobian_w(omega: &Vector3<f64>, sigma: f64) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let (a0, a1, a2) = if theta < 1.0 {
        let m = exp_moments(sigma, 2 * THETA_TERMS + 2);
        let mut a1 = 0.0;
        let mut a2 = 0.0;
        let mut pow = 1.0; // (-θ²)^j
        let mut fact_odd = 1.0; // (2j+1)!
        let mut fact_even = 2.0; // (2j+2)!
        for j in 0..THETA_TERMS {
            a1 += pow * m[2 * j + 1] / fact_odd;
            a2 += pow * m[2 * j + 2] / fact_even;
            pow *= -theta_sq;
            fact_odd *= ((2 * j + 2) * (2 * j + 3)) as f64;
            fact_even *= ((2 * j + 3) * (2 * j + 4)) as f64;
        }
        (m[0], a1, a2)
    } else {
        let es = sigma.exp();
        let a0 = if sigma == 0.0 {
            1.0
        } else {
            sigma.exp_m1() / sigma
        };
        let (sin, cos) = theta.sin_cos();
        let denom = sigma * sigma + theta_sq;
        // ∫ e^{σu} sin(θu) du / θ  and  ∫ e^{σu} cos(θu) du
        let a1 = (sigma * es * sin / theta - (es * cos - 1.0)) / denom;
        let c = ((es * cos - 1.0) * sigma + es * sin * theta) / denom;
        let a2 = (a0 - c) / theta_sq;
        (a0, a1, a2)
    };
    let k = skew(omega);
    Matrix3::identity() * a0 + k * a1 + k * k * a2
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{E, PI};

    fn random_tangent(rng: &mut ChaCha8Rng, radius: f64) -> Tangent {
        let v = Vector7::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let r = rng.random_range(0.0..radius);
        Tangent(v.normalize() * r)
    }

    /// Numerical quadrature of W, independent of the series/closed forms.
    fn w_by_quadrature(omega: &Vector3<f64>, sigma: f64) -> Matrix3<f64> {
        let n = 4000;
        let mut acc = Matrix3::zeros();
        for i in 0..n {
            // Simpson-free midpoint rule on a fine grid; smooth integrand
            let u = (i as f64 + 0.5) / n as f64;
            acc += Rotation::exp(&(omega * u)).matrix() * (sigma * u).exp();
        }
        acc / n as f64
    }

    #[test]
    fn exp_identity_and_pure_translation() {
        let t = Sim3::exp(&Tangent::zero());
        assert_eq!(t.scale(), 1.0);
        assert_eq!(t.translation(), &Vector3::zeros());
        assert!(t.rotation().angle() == 0.0);

        let t = Sim3::exp(&Tangent::from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        assert_eq!(t.scale(), 1.0);
        assert!((t.translation() - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        assert!(t.rotation().angle() < 1e-15);
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let t = Sim3::exp(&Tangent::from_slice(&[0.0, 0.0, 0.0, 0.0, 0.0, PI / 2.0, 0.0]));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((t.rotation().matrix() - expected).abs().max() < 1e-12);
        assert_eq!(t.translation(), &Vector3::zeros());
        assert_eq!(t.scale(), 1.0);
    }

    #[test]
    fn log_of_pure_scale() {
        let t = Sim3::new(E, Rotation::identity(), Vector3::zeros());
        let tau = t.log();
        assert!((tau.sigma() - 1.0).abs() < 1e-15);
        assert!(tau.rho().norm() < 1e-15 && tau.omega().norm() < 1e-15);
        assert_eq!(Sim3::identity().log(), Tangent::zero());
    }

    #[test]
    fn w_matches_quadrature_across_branches() {
        let cases = [
            (Vector3::new(0.0, 0.0, 0.0), 0.0),
            (Vector3::new(1e-7, 0.0, 0.0), 1e-9),
            (Vector3::new(0.3, -0.2, 0.1), 0.0),
            (Vector3::new(0.3, -0.2, 0.1), -0.7),
            (Vector3::new(0.9, 0.5, -0.2), 0.4),
            (Vector3::new(1.5, 0.5, -2.0), 0.0),
            (Vector3::new(1.5, 0.5, -2.0), 1.3),
            (Vector3::new(0.1, 0.0, 0.0), 9.5),
            (Vector3::new(2.0, 0.0, 1.0), -9.5),
        ];
        for (omega, sigma) in cases {
            let w = left_jacobian_w(&omega, sigma);
            let q = w_by_quadrature(&omega, sigma);
            let tol = 1e-6 * q.abs().max().max(1.0);
            assert!(
                (w - q).abs().max() < tol,
                "omega={omega:?} sigma={sigma}: {w} vs {q}"
            );
        }
    }

    #[test]
    fn exp_log_roundtrip_thousand_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let tau = random_tangent(&mut rng, 1.0);
            let back = Sim3::exp(&tau).log();
            worst = worst.max((back.0 - tau.0).norm());
        }
        assert!(worst < 1e-9, "worst roundtrip error {worst}");
    }

    #[test]
    fn compose_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = Sim3::exp(&random_tangent(&mut rng, 3.0));
            let id = t.compose(&t.inverse());
            assert!((id.scale() - 1.0).abs() < 1e-9);
            assert!(id.translation().norm() < 1e-9);
            assert!(id.rotation().angle() < 1e-9);
            let same = t.compose(&Sim3::identity());
            assert!((same.matrix() - t.matrix()).norm() < 1e-12);
        }
    }

    #[test]
    fn act_matches_homogeneous_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Sim3::new(2.0, Rotation::identity(), Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(t.act(&Vector3::new(1.0, 1.0, 1.0)), Vector3::new(2.0, 2.0, 3.0));
        for _ in 0..100 {
            let t = Sim3::exp(&random_tangent(&mut rng, 2.0));
            let x = Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let h = t.matrix() * x.push(1.0);
            assert!((t.act(&x) - h.xyz()).norm() < 1e-12);
        }
    }

    #[test]
    fn adjoint_conjugates_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let t = Sim3::exp(&random_tangent(&mut rng, 1.5));
            let tau = random_tangent(&mut rng, 0.5);
            let lhs = t.compose(&Sim3::exp(&tau)).compose(&t.inverse());
            let rhs = Sim3::exp(&Tangent(t.adjoint() * tau.0));
            let x = Vector3::new(0.3, -1.2, 2.0);
            assert!((lhs.act(&x) - rhs.act(&x)).norm() < 1e-9);
        }
    }

    #[test]
    fn retract_is_left_multiplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = Sim3::exp(&random_tangent(&mut rng, 1.0));
        assert_eq!(Sim3::retract(&Tangent::zero(), &t).to_array(), t.to_array());
        let tau = Tangent::from_slice(&[0.2, -0.1, 0.4, 0.0, 0.0, 0.0, 0.0]);
        let moved = Sim3::retract(&tau, &Sim3::identity());
        assert!(moved.rotation().angle() < 1e-15);
        assert!((moved.translation() - tau.rho()).norm() < 1e-15);
        for _ in 0..100 {
            let tau = random_tangent(&mut rng, 1.0);
            let x = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            let r = Sim3::retract(&tau, &t);
            assert!((r.act(&x) - Sim3::exp(&tau).act(&t.act(&x))).norm() < 1e-9);
        }
    }
}
