use serde::{Deserialize, Serialize};

use super::{Edge, EdgeKind, Keyframe};
use crate::error::{Error, Result};
use crate::geometry::{umeyama, Sim3};
use crate::matching::{correspond, MatchConfig};
use crate::predictor::Predictor;
use crate::tracking::{correspondences, solve_pose, TrackingConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    /// A correspondence is an inlier when its ray difference is below this.
    pub inlier_tol: f64,
    pub min_inlier_fraction: f64,
    /// Added to `s_min` when retrieving across agents.
    pub inter_agent_margin: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            inlier_tol: 0.02,
            min_inlier_fraction: 0.6,
            inter_agent_margin: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifiedLoop {
    /// Edge with `a = j` and `b = i`.
    pub edge: Edge,
    /// `T_j⁻¹·T_i` as estimated from the matches.
    pub relative: Sim3,
    pub inlier_fraction: f64,
}

/// Geometric check of a retrieval candidate pair.
///
/// Returns `Ok(None)` when the pair is not a loop.
#[allow(clippy::too_many_arguments)]
pub fn verify_loop(
    predictor: &dyn Predictor,
    i: &Keyframe,
    j: &Keyframe,
    e_min: usize,
    match_cfg: &MatchConfig,
    track_cfg: &TrackingConfig,
    cfg: &LoopConfig,
) -> Result<Option<VerifiedLoop>> {
    let pair = predictor.predict(i.frame, j.frame)?;
    let matches = correspond(&pair, match_cfg);
    if matches.len() < e_min.max(7) {
        return Ok(None);
    }
    let (src, dst): (Vec<_>, Vec<_>) = matches
        .iter()
        .filter_map(|m| {
            let s = *pair.points_second.get(m.query as usize)?;
            let d = *j.canonical.points.get(m.query as usize)?;
            Some((s, d))
        })
        .unzip();
    let current = j.pose.inverse().compose(&i.pose);
    let init = umeyama(&src, &dst, true).unwrap_or(current);
    let corrs = correspondences(&j.canonical.points, &i.canonical.points, &matches);
    let sol = match solve_pose(&corrs, &init, track_cfg) {
        Ok(s) => s,
        Err(Error::Underconstrained(_) | Error::DegenerateGeometry(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let inliers = corrs
        .iter()
        .filter(|c| {
            let y = sol.pose.act(&c.source);
            (c.target.normalize() - y.normalize()).norm() < cfg.inlier_tol
        })
        .count();
    let inlier_fraction = inliers as f64 / corrs.len() as f64;
    if inlier_fraction < cfg.min_inlier_fraction {
        return Ok(None);
    }
    let kind = if i.id.agent == j.id.agent { EdgeKind::IntraLoop } else { EdgeKind::InterLoop };
    Ok(Some(VerifiedLoop {
        edge: Edge {
            a: j.id,
            b: i.id,
            matches,
            kind,
        },
        relative: sol.pose,
        inlier_fraction,
    }))
}
