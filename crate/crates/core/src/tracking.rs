//! Relative Sim(3) pose estimation by robust ray alignment.
//!
//! A correspondence pairs a target point (keyframe side) with a source point
//! (frame side). At pose `T` the source maps to `y = T·source` and the
//! residual is the ray difference `ψ(target) − ψ(y)` plus a weighted distance
//! difference `w_d·(|target| − |y|)`, which makes scale observable.

use nalgebra::{Matrix3, SMatrix, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{huber, skew, Matrix7, Sim3, Tangent, Vector7};
use crate::matching::{sample_point, MatchSet, MatchStats};
use crate::pointmap::Pointmap;

pub type Matrix4x7 = SMatrix<f64, 4, 7>;

/// Lower clamp on match confidence before it is turned into a std.
pub const Q_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingConfig {
    pub sigma_r_sq: f64,
    pub huber_delta: f64,
    /// Weight of the distance residual relative to the ray residuals.
    pub dist_weight: f64,
    pub g_tol: f64,
    pub max_iters: usize,
    pub max_condition: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            sigma_r_sq: 1.0,
            huber_delta: 0.02,
            dist_weight: 0.05,
            g_tol: 1e-8,
            max_iters: 20,
            max_condition: 1e12,
        }
    }
}

/// Residual std of a match with confidence `q`.
pub fn irls_weight(q: f64, sigma_r_sq: f64) -> f64 {
    (sigma_r_sq / q.max(Q_FLOOR)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub target: Vector3<f64>,
    pub source: Vector3<f64>,
    pub confidence: f64,
}

/// Residual of `target` against an already transformed source point `y`.
pub fn residual(target: &Vector3<f64>, y: &Vector3<f64>, dist_weight: f64) -> Vector4<f64> {
    let (nt, ny) = (target.norm(), y.norm());
    let d = target / nt - y / ny;
    Vector4::new(d.x, d.y, d.z, dist_weight * (nt - ny))
}

/// Jacobian of [`residual`] with respect to `y`.
pub fn residual_wrt_point(y: &Vector3<f64>, dist_weight: f64) -> SMatrix<f64, 4, 3> {
    let n = y.norm();
    let psi = y / n;
    let ray = -(Matrix3::identity() - psi * psi.transpose()) / n;
    let mut j = SMatrix::<f64, 4, 3>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&ray);
    j.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-dist_weight * psi.transpose()));
    j
}

/// Derivative of `exp(τ)·y` at `τ = 0`, ordered `[ρ, ω, σ]`.
pub fn point_wrt_tangent(y: &Vector3<f64>) -> SMatrix<f64, 3, 7> {
    let mut g = SMatrix::<f64, 3, 7>::zeros();
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    g.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(y)));
    g.fixed_view_mut::<3, 1>(0, 6).copy_from(y);
    g
}

/// Jacobian of the residual at `y = T·source` under `T ← exp(τ)·T`.
pub fn residual_jacobian(y: &Vector3<f64>, dist_weight: f64) -> Matrix4x7 {
    residual_wrt_point(y, dist_weight) * point_wrt_tangent(y)
}

/// Robust loss of a residual and its IRLS weights, per component.
pub fn robust_terms(r: &Vector4<f64>, std: f64, delta: f64) -> (f64, Vector4<f64>) {
    let mut loss = 0.0;
    let mut w = Vector4::zeros();
    for c in 0..4 {
        let (l, hw) = huber(r[c] / std, delta);
        loss += l;
        w[c] = hw / (std * std);
    }
    (loss, w)
}

fn usable(p: &Vector3<f64>) -> bool {
    p.iter().all(|v| v.is_finite()) && p.norm() > 1e-9
}

/// Robust energy of the correspondences at pose `t`.
pub fn energy(corrs: &[Correspondence], t: &Sim3, cfg: &TrackingConfig) -> f64 {
    corrs
        .iter()
        .map(|c| {
            let y = t.act(&c.source);
            if !usable(&y) {
                return 0.0;
            }
            let r = residual(&c.target, &y, cfg.dist_weight);
            robust_terms(&r, irls_weight(c.confidence, cfg.sigma_r_sq), cfg.huber_delta).0
        })
        .sum()
}

fn linearize(corrs: &[Correspondence], t: &Sim3, cfg: &TrackingConfig) -> (f64, Matrix7, Vector7) {
    let mut h = Matrix7::zeros();
    let mut g = Vector7::zeros();
    let mut e = 0.0;
    for c in corrs {
        let y = t.act(&c.source);
        if !usable(&y) {
            continue;
        }
        let r = residual(&c.target, &y, cfg.dist_weight);
        let (loss, w) = robust_terms(&r, irls_weight(c.confidence, cfg.sigma_r_sq), cfg.huber_delta);
        e += loss;
        let j = residual_jacobian(&y, cfg.dist_weight);
        let wj = Matrix4x7::from_fn(|row, col| w[row] * j[(row, col)]);
        h += j.transpose() * wj;
        g += wj.transpose() * r;
    }
    (e, h, g)
}

/// Condition number of a symmetric positive semi-definite matrix.
pub fn condition_number(h: &Matrix7) -> f64 {
    let eig = h.symmetric_eigen().eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingResult {
    pub pose: Sim3,
    pub energy: f64,
    pub iterations: usize,
    /// Energy at the start and after every accepted step.
    pub energy_trace: Vec<f64>,
    pub converged: bool,
    pub stats: Option<MatchStats>,
}

/// Damped Gauss-Newton with IRLS reweighting over a set of correspondences.
pub fn solve_pose(corrs: &[Correspondence], init: &Sim3, cfg: &TrackingConfig) -> Result<TrackingResult> {
    if corrs.len() < 7 {
        return Err(Error::Underconstrained(corrs.len()));
    }
    let mut t = *init;
    let (mut e, mut h, mut g) = linearize(corrs, &t, cfg);
    let cond = condition_number(&h);
    if !(cond <= cfg.max_condition) {
        return Err(Error::DegenerateGeometry(cond));
    }
    let mut trace = vec![e];
    let mut lambda = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        if g.norm() < cfg.g_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let damped = h + Matrix7::from_diagonal(&h.diagonal()) * lambda;
        let step = damped.cholesky().map(|c| c.solve(&(-g)));
        let accepted = match step {
            Some(step) if step.iter().all(|v| v.is_finite()) => {
                let cand = Sim3::retract(&Tangent(step), &t);
                let e_new = energy(corrs, &cand, cfg);
                if cand.is_finite() && e_new <= e {
                    t = cand;
                    if step.norm() < 1e-14 {
                        converged = true;
                    }
                    true
                } else {
                    false
                }
            }
            _ => false,
        };
        if accepted {
            (e, h, g) = linearize(corrs, &t, cfg);
            trace.push(e);
            lambda /= 10.0;
            if converged {
                break;
            }
        } else {
            lambda = if lambda == 0.0 { 1e-4 } else { lambda * 10.0 };
            if lambda > 1e10 {
                // no descent direction left at machine precision
                converged = true;
                break;
            }
        }
    }
    Ok(TrackingResult {
        pose: t,
        energy: e,
        iterations,
        energy_trace: trace,
        converged,
        stats: None,
    })
}

/// Builds correspondences from matches: target from `target_pm[query]`,
/// source sampled from `source_pm` at the match's reference location.
pub fn correspondences(target_pm: &Pointmap, source_pm: &Pointmap, matches: &MatchSet) -> Vec<Correspondence> {
    matches
        .iter()
        .filter_map(|m| {
            let target = *target_pm.get(m.query as usize)?;
            let source = sample_point(source_pm, m.reference_uv)?;
            (usable(&target) && usable(&source) && m.weight > 0.0).then_some(Correspondence {
                target,
                source,
                confidence: m.weight,
            })
        })
        .collect()
}

/// Pose of the frame relative to the keyframe, `T_kf`, mapping frame points into the keyframe.
pub fn estimate_relative_pose(
    keyframe_points: &Pointmap,
    frame_points: &Pointmap,
    matches: &MatchSet,
    init: &Sim3,
    cfg: &TrackingConfig,
) -> Result<TrackingResult> {
    let corrs = correspondences(keyframe_points, frame_points, matches);
    solve_pose(&corrs, init, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use crate::matching::{correspond, Match, MatchConfig};
    use crate::predictor::{FrameId, NoiseModel, OraclePredictor, Predictor, SceneConfig, SyntheticScene};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn irls_weight_examples() {
        assert_eq!(irls_weight(0.7, 0.7), 1.0);
        assert!(irls_weight(100.0, 1.0) < irls_weight(1.0, 1.0));
        assert!(irls_weight(1e6, 1.0) < 1e-2);
        let w0 = irls_weight(0.0, 1.0);
        assert!(w0.is_finite() && w0 == irls_weight(Q_FLOOR, 1.0));
    }

    fn random_state(rng: &mut ChaCha8Rng) -> (Sim3, Vector3<f64>, Vector3<f64>) {
        let mut v = || rng.random_range(-1.0..1.0);
        let t = Sim3::exp(&Tangent::from_slice(&[v(), v(), v(), v(), v(), v(), 0.5 * v()]));
        let source = Vector3::new(v(), v(), 2.0 + v());
        let target = Vector3::new(v(), v(), 2.0 + v());
        (t, source, target)
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..100 {
            let (t, source, target) = random_state(&mut rng);
            let y = t.act(&source);
            let analytic = residual_jacobian(&y, 0.05);
            let mut numeric = Matrix4x7::zeros();
            for k in 0..7 {
                let mut e = Vector7::zeros();
                e[k] = h;
                let plus = residual(&target, &Sim3::retract(&Tangent(e), &t).act(&source), 0.05);
                let minus = residual(&target, &Sim3::retract(&Tangent(-e), &t).act(&source), 0.05);
                numeric.set_column(k, &((plus - minus) / (2.0 * h)));
            }
            let rel = (numeric - analytic).norm() / analytic.norm();
            assert!(rel < 1e-5, "relative error {rel}");
        }
    }

    fn loop_oracle(noise: NoiseModel) -> OraclePredictor {
        let s = SyntheticScene::build(&SceneConfig::demo_loop(200)).unwrap();
        OraclePredictor::new(Arc::new(s), noise, 5)
    }

    fn truth(o: &OraclePredictor, k: u32, f: u32) -> Sim3 {
        let tr = &o.scene().trajectories[0];
        tr[k as usize].inverse().compose(&tr[f as usize])
    }

    fn pose_error(a: &Sim3, b: &Sim3) -> (f64, f64, f64) {
        let d = a.inverse().compose(b);
        (d.rotation().angle(), (a.translation() - b.translation()).norm(), (a.scale() / b.scale() - 1.0).abs())
    }

    #[test]
    fn identity_problem_has_zero_energy() {
        let o = loop_oracle(NoiseModel::noiseless());
        let f = FrameId::new(0, 4);
        let pair = o.predict(f, f).unwrap();
        let m = correspond(&pair, &MatchConfig::default());
        let r = estimate_relative_pose(&pair.points_first, &pair.points_first, &m, &Sim3::identity(), &TrackingConfig::default()).unwrap();
        assert!(r.energy < 1e-20);
        let (rot, trans, scale) = pose_error(&r.pose, &Sim3::identity());
        assert!(rot < 1e-12 && trans < 1e-12 && scale < 1e-12);
    }

    #[test]
    fn recovers_oracle_relative_pose() {
        let o = loop_oracle(NoiseModel::noiseless());
        let cfg = TrackingConfig::default();
        for (k, f) in [(10, 15), (40, 43), (100, 101), (150, 155)] {
            let (kf, fr) = (FrameId::new(0, k), FrameId::new(0, f));
            let pair = o.predict(fr, kf).unwrap();
            let canon = o.monocular_init(kf).unwrap().points;
            let m = correspond(&pair, &MatchConfig::default());
            let r = estimate_relative_pose(&canon, &pair.points_first, &m, &Sim3::identity(), &cfg).unwrap();
            let gt = truth(&o, k, f);
            assert!(gt.rotation().angle() <= 10f64.to_radians() && gt.translation().norm() <= 0.3);
            let (rot, trans, scale) = pose_error(&r.pose, &gt);
            assert!(rot < 1e-4 && trans < 1e-4 && scale < 1e-4, "{k}->{f}: {rot:e} {trans:e} {scale:e}");
            for w in r.energy_trace.windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
    }

    #[test]
    fn recovers_scale_of_perturbed_frame() {
        let o = loop_oracle(NoiseModel::noiseless());
        let (kf, fr) = (FrameId::new(0, 20), FrameId::new(0, 24));
        let pair = o.predict(fr, kf).unwrap();
        let canon = o.monocular_init(kf).unwrap().points;
        let m = correspond(&pair, &MatchConfig::default());
        let scaled = pair.points_first.scaled(2.0);
        let r = estimate_relative_pose(&canon, &scaled, &m, &Sim3::identity(), &TrackingConfig::default()).unwrap();
        assert!((r.pose.scale() - 0.5).abs() < 1e-3, "scale {}", r.pose.scale());
    }

    #[test]
    fn gauge_sanity_from_rotated_init() {
        let o = loop_oracle(NoiseModel::noiseless());
        let f = FrameId::new(0, 60);
        let pair = o.predict(f, f).unwrap();
        let m = correspond(&pair, &MatchConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let init = Sim3::from_rotation_translation(Rotation::exp(&(axis * 30f64.to_radians())), Vector3::zeros());
            let cfg = TrackingConfig { max_iters: 50, ..Default::default() };
            let r = estimate_relative_pose(&pair.points_first, &pair.points_first, &m, &init, &cfg).unwrap();
            let (rot, trans, scale) = pose_error(&r.pose, &Sim3::identity());
            assert!(rot < 1e-6 && trans < 1e-6 && scale < 1e-6, "{rot:e} {trans:e} {scale:e}");
        }
    }

    #[test]
    fn outliers_barely_move_the_estimate() {
        let o = loop_oracle(NoiseModel::noiseless());
        let (kf, fr) = (FrameId::new(0, 30), FrameId::new(0, 34));
        let pair = o.predict(fr, kf).unwrap();
        let canon = o.monocular_init(kf).unwrap().points;
        let mut m = correspond(&pair, &MatchConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w) = canon.dims();
        let n = m.len();
        for k in rand::seq::index::sample(&mut rng, n, n / 5) {
            let r = rng.random_range(0..(h * w) as u32);
            m.matches[k] = Match { reference: r, reference_uv: [(r as usize % w) as f64, (r as usize / w) as f64], weight: 1.0, ..m.matches[k] };
        }
        let r = estimate_relative_pose(&canon, &pair.points_first, &m, &Sim3::identity(), &TrackingConfig::default()).unwrap();
        let (rot, _, _) = pose_error(&r.pose, &truth(&o, 30, 34));
        assert!(rot < 0.01, "rotation error {rot}");
    }

    #[test]
    fn too_few_matches_is_underconstrained() {
        let c = Correspondence { target: Vector3::new(0.0, 0.0, 1.0), source: Vector3::new(0.0, 0.0, 1.0), confidence: 1.0 };
        assert!(matches!(solve_pose(&[c; 6], &Sim3::identity(), &TrackingConfig::default()), Err(Error::Underconstrained(6))));
        assert!(matches!(solve_pose(&[c; 20], &Sim3::identity(), &TrackingConfig::default()), Err(Error::DegenerateGeometry(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn energy_trace_never_increases(seed in any::<u64>(), n in 10usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = Sim3::exp(&Tangent::from_slice(&[0.1, -0.05, 0.08, 0.05, -0.1, 0.07, 0.05]));
            let corrs: Vec<_> = (0..n).map(|_| {
                let s = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..3.0));
                let noise = Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
                Correspondence { target: gt.act(&s) + noise, source: s, confidence: rng.random_range(0.1..1.0) }
            }).collect();
            let r = solve_pose(&corrs, &Sim3::identity(), &TrackingConfig::default()).unwrap();
            for w in r.energy_trace.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            prop_assert!(r.energy <= r.energy_trace[0]);
        }
    }
}
