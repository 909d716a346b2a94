//! Trajectory and dense-geometry metrics.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{umeyama, Sim3};
use crate::predictor::CameraIntrinsics;

/// Largest timestamp gap accepted when associating inexact stamps.
pub const MAX_ASSOCIATION_GAP: f64 = 0.05;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    stamps: Vec<f64>,
    poses: Vec<Sim3>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, Sim3)>) -> Result<Self> {
        let mut t = Self::new();
        for (s, p) in pairs {
            t.push(s, p)?;
        }
        Ok(t)
    }

    /// Appends a pose; stamps must be strictly increasing.
    pub fn push(&mut self, stamp: f64, pose: Sim3) -> Result<()> {
        if !stamp.is_finite() || self.stamps.last().is_some_and(|&last| stamp <= last) {
            return Err(Error::Metric(format!("timestamp {stamp} is not strictly increasing")));
        }
        self.stamps.push(stamp);
        self.poses.push(pose);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &Sim3)> {
        self.stamps.iter().copied().zip(&self.poses)
    }

    pub fn stamps(&self) -> &[f64] {
        &self.stamps
    }

    pub fn poses(&self) -> &[Sim3] {
        &self.poses
    }

    /// Pose with the nearest stamp, if within `MAX_ASSOCIATION_GAP`.
    pub fn at(&self, stamp: f64) -> Option<&Sim3> {
        let i = self.stamps.partition_point(|&s| s < stamp);
        [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter(|&j| j < self.len())
            .map(|j| (j, (self.stamps[j] - stamp).abs()))
            .filter(|&(_, gap)| gap <= MAX_ASSOCIATION_GAP)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(j, _)| &self.poses[j])
    }

    /// Applies `t` on the left of every pose.
    pub fn transformed(&self, t: &Sim3) -> Trajectory {
        Trajectory {
            stamps: self.stamps.clone(),
            poses: self.poses.iter().map(|p| t.compose(p)).collect(),
        }
    }
}

/// Position pairs `(est, gt)` associated by timestamp.
pub fn associate(est: &Trajectory, gt: &Trajectory) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    est.iter()
        .filter_map(|(s, p)| gt.at(s).map(|g| (*p.translation(), *g.translation())))
        .unzip()
}

/// Similarity `T` minimizing `Σ‖gt_i − T·est_i‖²` over associated positions.
pub fn align_umeyama(est: &Trajectory, gt: &Trajectory) -> Result<Sim3> {
    let (src, dst) = associate(est, gt);
    align_positions(&src, &dst)
}

fn align_positions(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Sim3> {
    if src.len() < 3 {
        return Err(Error::Alignment(format!("{} associated positions, need 3", src.len())));
    }
    for pts in [src, dst] {
        let mu = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
        let cov: Matrix3<f64> = pts.iter().map(|p| (p - mu) * (p - mu).transpose()).sum();
        let mut sv = cov.symmetric_eigenvalues();
        sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
        if !(sv[1] > 1e-12 * sv[0].max(1e-300)) {
            return Err(Error::Alignment("positions are collinear".into()));
        }
    }
    umeyama(src, dst, true).map_err(|e| Error::Alignment(e.to_string()))
}

/// Position RMSE after similarity alignment.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    let (src, dst) = associate(est, gt);
    let t = align_positions(&src, &dst)?;
    Ok(rmse(src.iter().map(|p| t.act(p)).zip(&dst).map(|(a, b)| (a - b).norm())))
}

/// Position RMSE without alignment.
pub fn ate_rmse_unaligned(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    let (src, dst) = associate(est, gt);
    if src.is_empty() {
        return Err(Error::Alignment("no associated positions".into()));
    }
    Ok(rmse(src.iter().zip(&dst).map(|(a, b)| (a - b).norm())))
}

fn rmse(d: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in d {
        s += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub confidence: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        Self { points, confidence: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &Sim3) -> Self {
        Self {
            points: self.points.iter().map(|p| t.act(p)).collect(),
            confidence: self.confidence.clone(),
        }
    }

    pub fn extend(&mut self, other: &PointCloud) {
        match (&mut self.confidence, &other.confidence) {
            (Some(a), Some(b)) => a.extend(b),
            (Some(a), None) => a.extend(std::iter::repeat_n(1.0, other.len())),
            (None, Some(b)) if self.points.is_empty() => self.confidence = Some(b.clone()),
            (None, Some(_)) => {}
            (None, None) => {}
        }
        self.points.extend(&other.points);
    }
}

/// Exact nearest-neighbour index over a fixed cloud.
pub struct NnIndex {
    tree: ImmutableKdTree<f64, 3>,
    len: usize,
}

impl NnIndex {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        Self {
            tree: ImmutableKdTree::new_from_slice(&raw),
            len: points.len(),
        }
    }

    /// Index and Euclidean distance of the closest point.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.len == 0 {
            return None;
        }
        let nn = self.tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]);
        Some((nn.item as usize, nn.distance.sqrt()))
    }
}

/// Row-major depth along the camera z axis; non-positive or non-finite values are invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
}

/// World-frame cloud from depth images and world-from-camera poses.
pub fn backproject_gt(depths: &[DepthImage], poses: &[Sim3], intrinsics: &CameraIntrinsics) -> Result<PointCloud> {
    if depths.len() != poses.len() {
        return Err(Error::Metric(format!("{} depth images for {} poses", depths.len(), poses.len())));
    }
    let mut points = vec![];
    for (d, pose) in depths.iter().zip(poses) {
        if (d.height, d.width) != (intrinsics.height, intrinsics.width) || d.depth.len() != d.height * d.width {
            return Err(Error::DimensionMismatch {
                expected: (intrinsics.height, intrinsics.width),
                got: (d.height, d.width),
            });
        }
        for row in 0..d.height {
            for col in 0..d.width {
                let z = d.depth[row * d.width + col];
                if z.is_finite() && z > 0.0 {
                    points.push(pose.act(&(intrinsics.pixel_direction(row, col) * z)));
                }
            }
        }
    }
    Ok(PointCloud::from_points(points))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpConfig {
    /// Correspondences farther apart than this are ignored.
    pub radius: f64,
    pub max_iters: usize,
    /// Stop once the mean residual changes by less than this.
    pub tol: f64,
    pub with_scale: bool,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            radius: 0.5,
            max_iters: 50,
            tol: 1e-8,
            with_scale: true,
        }
    }
}

/// Point-to-point ICP. Returns `T` with `T·source ≈ target`.
pub fn icp_align(source: &PointCloud, target: &PointCloud, init: &Sim3, cfg: &IcpConfig) -> Result<Sim3> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Alignment("empty cloud".into()));
    }
    let index = NnIndex::new(&target.points);
    let mut t = *init;
    let mut prev_pairs: Vec<(usize, usize)> = vec![];
    let mut prev_mean = f64::INFINITY;
    for _ in 0..cfg.max_iters {
        let pairs: Vec<(usize, usize)> = source
            .points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let (j, d) = index.nearest(&t.act(p))?;
                (d <= cfg.radius).then_some((i, j))
            })
            .collect();
        if pairs.len() < 3 {
            return Err(Error::Alignment(format!(
                "{} correspondences within {} m",
                pairs.len(),
                cfg.radius
            )));
        }
        if pairs == prev_pairs {
            break;
        }
        let src: Vec<_> = pairs.iter().map(|&(i, _)| source.points[i]).collect();
        let dst: Vec<_> = pairs.iter().map(|&(_, j)| target.points[j]).collect();
        t = umeyama(&src, &dst, cfg.with_scale).map_err(|e| Error::Alignment(e.to_string()))?;
        let mean = src.iter().zip(&dst).map(|(s, d)| (t.act(s) - d).norm()).sum::<f64>() / src.len() as f64;
        prev_pairs = pairs;
        if (prev_mean - mean).abs() < cfg.tol {
            break;
        }
        prev_mean = mean;
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryMetrics {
    pub accuracy: f64,
    pub completion: f64,
    pub chamfer: f64,
}

pub const DEFAULT_METRIC_THRESHOLD: f64 = 0.5;

/// RMSE of nearest-neighbour distances from `from` into `index`, keeping those within `threshold`.
fn directed_rmse(from: &[Vector3<f64>], index: &NnIndex, threshold: f64) -> Result<f64> {
    let kept: Vec<f64> = from
        .iter()
        .filter_map(|p| index.nearest(p).map(|(_, d)| d))
        .filter(|&d| d <= threshold)
        .collect();
    if kept.is_empty() {
        return Err(Error::Metric(format!("no points within {threshold} m")));
    }
    Ok(rmse(kept.into_iter()))
}

pub fn geometry_metrics(est: &PointCloud, gt: &PointCloud, threshold: f64) -> Result<GeometryMetrics> {
    if est.is_empty() || gt.is_empty() {
        return Err(Error::Metric("empty point cloud".into()));
    }
    let accuracy = directed_rmse(&est.points, &NnIndex::new(&gt.points), threshold)?;
    let completion = directed_rmse(&gt.points, &NnIndex::new(&est.points), threshold)?;
    Ok(GeometryMetrics {
        accuracy,
        completion,
        chamfer: (accuracy + completion) / 2.0,
    })
}
