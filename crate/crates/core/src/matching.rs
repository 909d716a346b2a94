//! Pixel correspondences between two pointmaps expressed in the same frame.
//!
//! For each valid query point the reference pixel whose ray best matches the
//! query ray is found by Levenberg-Marquardt over continuous pixel
//! coordinates, then snapped to the best feature match in a small window.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pointmap::{to_rays, FeatureMap, Pointmap, PredictionPair, RayGrid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    pub max_iters: usize,
    pub lambda_init: f64,
    /// Acceptance threshold on the squared ray error.
    pub theta_match: f64,
    /// Stop once a step moves less than this many pixels.
    pub step_tol: f64,
    /// Side length of the feature search window, in pixels.
    pub window: usize,
    /// Matches whose weight falls below this are dropped.
    pub min_weight: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            max_iters: 10,
            lambda_init: 1e-3,
            theta_match: 1e-4,
            step_tol: 1e-3,
            window: 5,
            min_weight: 0.1,
        }
    }
}

/// One correspondence: `query` pixel matched to `reference` pixel.
///
/// `reference_uv` keeps the continuous `(u, v)` location the ray search
/// converged to; `reference` is that location rounded to the nearest pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub query: u32,
    pub reference: u32,
    pub reference_uv: [f64; 2],
    pub weight: f64,
}

/// Correspondences with unique query pixels, in increasing query order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Match> {
        self.matches.iter()
    }

    /// Drops matches with weight below `min` (and always zero weights).
    pub fn pruned(mut self, min: f64) -> Self {
        self.matches.retain(|m| m.weight > 0.0 && m.weight >= min);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchStats {
    pub valid_fraction: f64,
    pub matched_count: usize,
}

pub fn match_stats(m: &MatchSet, total_query_pixels: usize) -> MatchStats {
    let valid_fraction = if total_query_pixels == 0 {
        0.0
    } else {
        m.len() as f64 / total_query_pixels as f64
    };
    MatchStats {
        valid_fraction,
        matched_count: m.len(),
    }
}

struct Sample {
    ray: Vector3<f64>,
    d_u: Vector3<f64>,
    d_v: Vector3<f64>,
}

fn cell(x: f64, n: usize) -> (usize, f64) {
    let c = (x.floor().max(0.0) as usize).min(n.saturating_sub(2));
    (c, x - c as f64)
}

/// Normalized bilinear interpolation of the ray grid and its derivatives.
fn sample_rays(g: &RayGrid, u: f64, v: f64) -> Option<Sample> {
    if g.width < 2 || g.height < 2 {
        return None;
    }
    let (c0, fu) = cell(u, g.width);
    let (r0, fv) = cell(v, g.height);
    let at = |r: usize, c: usize| g.ray(r * g.width + c);
    let (a, b, c, d) = (at(r0, c0)?, at(r0, c0 + 1)?, at(r0 + 1, c0)?, at(r0 + 1, c0 + 1)?);
    let raw = a * ((1.0 - fu) * (1.0 - fv)) + b * (fu * (1.0 - fv)) + c * ((1.0 - fu) * fv) + d * (fu * fv);
    let n = raw.norm();
    if n < 1e-12 {
        return None;
    }
    let ray = raw / n;
    let proj = (Matrix3::identity() - ray * ray.transpose()) / n;
    let du = (b - a) * (1.0 - fv) + (d - c) * fv;
    let dv = (c - a) * (1.0 - fu) + (d - b) * fu;
    Some(Sample {
        ray,
        d_u: proj * du,
        d_v: proj * dv,
    })
}

/// Border solutions with a smaller squared ray error count as exact hits.
const PINNED_MIN_COST: f64 = 1e-12;

/// Result of one per-pixel ray search.
#[derive(Clone, Debug)]
pub struct PixelSolve {
    pub uv: [f64; 2],
    pub cost: f64,
    /// The optimum lies outside the grid and the solution is held at its border.
    pub pinned: bool,
    /// Cost after the start and after every accepted step.
    pub trace: Vec<f64>,
}

/// Levenberg-Marquardt minimisation of `|ψ_ref(u, v) − target|²` from `start`.
pub fn solve_pixel(reference: &RayGrid, target: &Vector3<f64>, start: [f64; 2], cfg: &MatchConfig) -> Option<PixelSolve> {
    let clamp = |p: Vector2<f64>| {
        Vector2::new(
            p.x.clamp(0.0, (reference.width - 1) as f64),
            p.y.clamp(0.0, (reference.height - 1) as f64),
        )
    };
    let mut p = clamp(Vector2::new(start[0], start[1]));
    let mut s = sample_rays(reference, p.x, p.y)?;
    let mut cost = (s.ray - target).norm_squared();
    let mut trace = vec![cost];
    let mut lambda = cfg.lambda_init;
    for _ in 0..cfg.max_iters {
        let r = s.ray - target;
        let j = nalgebra::Matrix3x2::from_columns(&[s.d_u, s.d_v]);
        let h = j.transpose() * j;
        let g = j.transpose() * r;
        let damped = h + Matrix2::from_diagonal(&h.diagonal()) * lambda;
        let Some(step) = damped.lu().solve(&(-g)) else {
            lambda *= 10.0;
            continue;
        };
        let cand = clamp(p + step);
        let moved = (cand - p).norm();
        match sample_rays(reference, cand.x, cand.y) {
            Some(ns) if (ns.ray - target).norm_squared() < cost => {
                cost = (ns.ray - target).norm_squared();
                trace.push(cost);
                p = cand;
                s = ns;
                lambda /= 10.0;
                if moved < cfg.step_tol {
                    break;
                }
            }
            _ => lambda *= 10.0,
        }
    }
    let r = s.ray - target;
    let (gu, gv) = (s.d_u.dot(&r), s.d_v.dot(&r));
    let (wmax, hmax) = ((reference.width - 1) as f64, (reference.height - 1) as f64);
    let pinned = (p.x == 0.0 && gu > 0.0)
        || (p.x == wmax && gu < 0.0)
        || (p.y == 0.0 && gv > 0.0)
        || (p.y == hmax && gv < 0.0);
    Some(PixelSolve {
        uv: [p.x, p.y],
        cost,
        pinned: pinned && cost > PINNED_MIN_COST,
        trace,
    })
}

fn rounded_index(uv: [f64; 2], width: usize) -> usize {
    uv[1].round() as usize * width + uv[0].round() as usize
}

/// Ray matching: for each valid query pixel, the reference pixel with the closest ray.
///
/// Both pointmaps must be in the same coordinate frame and share a grid size.
/// Weights are left at zero; see [`refine_with_features`].
pub fn match_rays(reference: &Pointmap, query: &Pointmap, cfg: &MatchConfig) -> MatchSet {
    let ref_rays = to_rays(reference);
    let qry_rays = to_rays(query);
    let (h, w) = reference.dims();
    if h == 0 || w == 0 {
        return MatchSet::default();
    }
    let qw = query.width();
    let matches = (0..query.len())
        .into_par_iter()
        .filter_map(|n| {
            let target = qry_rays.ray(n)?;
            let (row, col) = (n / qw, n % qw);
            let start = [col as f64, row as f64];
            let solve = if w < 2 || h < 2 {
                // single row or column grids have no interpolation cell
                let idx = (row.min(h - 1)) * w + col.min(w - 1);
                let ray = ref_rays.ray(idx)?;
                PixelSolve {
                    uv: [(idx % w) as f64, (idx / w) as f64],
                    cost: (ray - target).norm_squared(),
                    pinned: false,
                    trace: vec![],
                }
            } else {
                solve_pixel(&ref_rays, target, start, cfg)?
            };
            if !(solve.cost <= cfg.theta_match) || solve.pinned {
                return None;
            }
            let reference = rounded_index(solve.uv, w);
            if !ref_rays.mask[reference] {
                return None;
            }
            Some(Match {
                query: n as u32,
                reference: reference as u32,
                reference_uv: solve.uv,
                weight: 0.0,
            })
        })
        .collect();
    MatchSet { matches }
}

/// Moves each match to the most feature-similar reference pixel in a
/// `window × window` neighbourhood and sets its weight to `min(Q_ref, Q_qry)`.
///
/// The continuous reference location is kept when the feature optimum lies
/// on a corner of the interpolation cell around it; otherwise it snaps to
/// the optimum pixel.
pub fn refine_with_features(
    initial: &MatchSet,
    ref_feat: &FeatureMap,
    qry_feat: &FeatureMap,
    window: usize,
) -> MatchSet {
    let (h, w) = ref_feat.dims();
    let radius = (window / 2) as i64;
    let matches = initial
        .matches
        .par_iter()
        .map(|m| {
            let q = m.query as usize;
            let r0 = m.reference as usize;
            let (row0, col0) = ((r0 / w) as i64, (r0 % w) as i64);
            let mut best = (ref_feat.similarity(r0, qry_feat, q), r0);
            if window > 0 {
                for dr in -radius..=radius {
                    for dc in -radius..=radius {
                        let (r, c) = (row0 + dr, col0 + dc);
                        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                            continue;
                        }
                        let idx = (r as usize) * w + c as usize;
                        if ref_feat.confidence(idx) <= 0.0 {
                            continue;
                        }
                        let s = ref_feat.similarity(idx, qry_feat, q);
                        if s > best.0 {
                            best = (s, idx);
                        }
                    }
                }
            }
            let idx = best.1;
            let (row, col) = ((idx / w) as f64, (idx % w) as f64);
            let [u, v] = m.reference_uv;
            let reference_uv = if (col - u).abs() < 1.0 && (row - v).abs() < 1.0 {
                m.reference_uv
            } else {
                [col, row]
            };
            Match {
                query: m.query,
                reference: idx as u32,
                reference_uv,
                weight: ref_feat.confidence(idx).min(qry_feat.confidence(q)),
            }
        })
        .collect();
    MatchSet { matches }
}

/// Matches the second view of a prediction (query) against the first (reference),
/// refines with features and drops low-weight matches.
///
/// A feature-refined match whose ray error exceeds `theta_match` falls back
/// to its ray solution, so refinement cannot turn an accepted match into one
/// the ray test would reject.
pub fn correspond(pair: &PredictionPair, cfg: &MatchConfig) -> MatchSet {
    let initial = match_rays(&pair.points_first, &pair.points_second, cfg);
    let refined = refine_with_features(&initial, &pair.features_first, &pair.features_second, cfg.window);
    let ref_rays = to_rays(&pair.points_first);
    let qry_rays = to_rays(&pair.points_second);
    let matches = initial
        .iter()
        .zip(refined.iter())
        .map(|(a, b)| {
            let ok = match (ref_rays.ray(b.reference as usize), qry_rays.ray(b.query as usize)) {
                (Some(r), Some(q)) => (r - q).norm_squared() <= cfg.theta_match,
                _ => false,
            };
            if ok {
                *b
            } else {
                Match {
                    weight: pair.features_first.confidence(a.reference as usize).min(pair.features_second.confidence(a.query as usize)),
                    ..*a
                }
            }
        })
        .collect();
    MatchSet { matches }.pruned(cfg.min_weight)
}

/// Largest relative spread of corner distances treated as one surface.
const MAX_CELL_SPREAD: f64 = 0.1;
/// Out-of-plane offset of the fourth corner, relative to the cell size, still treated as planar.
const COPLANAR_TOL: f64 = 1e-3;

/// Point of `pm` at continuous `(u, v)`.
///
/// The direction is the interpolated unit ray. On a planar cell the distance
/// comes from intersecting that ray with the cell's plane, which is exact on
/// planar surfaces; otherwise the corner distances are interpolated
/// bilinearly. Cells with a masked corner or a depth discontinuity yield
/// `None`; integer locations return the pixel's point unchanged.
pub fn sample_point(pm: &Pointmap, uv: [f64; 2]) -> Option<Vector3<f64>> {
    let (h, w) = pm.dims();
    if uv[0].fract() == 0.0 && uv[1].fract() == 0.0 || w < 2 || h < 2 {
        let u = uv[0].clamp(0.0, (w - 1) as f64);
        let v = uv[1].clamp(0.0, (h - 1) as f64);
        return pm.get(rounded_index([u, v], w)).copied();
    }
    let (c0, fu) = cell(uv[0], w);
    let (r0, fv) = cell(uv[1], h);
    let a = *pm.get(r0 * w + c0)?;
    let b = *pm.get(r0 * w + c0 + 1)?;
    let c = *pm.get((r0 + 1) * w + c0)?;
    let d = *pm.get((r0 + 1) * w + c0 + 1)?;
    let norms = [a.norm(), b.norm(), c.norm(), d.norm()];
    let lo = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = norms.iter().cloned().fold(0.0, f64::max);
    if !(lo > 1e-12) || hi > lo * (1.0 + MAX_CELL_SPREAD) {
        return None;
    }
    let weights = [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv];
    let corners = [a, b, c, d];
    let mut ray = Vector3::zeros();
    let mut dist = 0.0;
    for k in 0..4 {
        ray += corners[k] * (weights[k] / norms[k]);
        dist += weights[k] * norms[k];
    }
    let ray = ray.try_normalize(1e-12)?;
    let normal = (b - a).cross(&(d - a)).try_normalize(1e-300);
    let size = (d - a).norm().max((c - b).norm());
    if let Some(normal) = normal {
        let planar = normal.dot(&(c - a)).abs() <= COPLANAR_TOL * size;
        let denom = normal.dot(&ray);
        if planar && denom.abs() > 1e-6 {
            let t = normal.dot(&a) / denom;
            if t >= lo * (1.0 - MAX_CELL_SPREAD) && t <= hi * (1.0 + MAX_CELL_SPREAD) {
                return Some(ray * t);
            }
        }
    }
    Some(ray * dist)
}
