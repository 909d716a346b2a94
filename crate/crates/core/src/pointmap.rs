//! Dense per-pixel grids (points, confidences, features) and canonical-keyframe fusion.
//!
//! All grids are row-major: pixel `(row, col)` lives at index `row * width + col`.
//! Masked pixels hold the point `(0, 0, 0)` and confidence `0`; consumers test
//! the mask, never the sentinel values.

use std::io::{Read, Write};

use nalgebra::Vector3;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::geometry::{Sim3, RAY_EPSILON};

pub const DEFAULT_FEATURE_DIM: usize = 24;

const PMAP_MAGIC: &[u8; 4] = b"PMAP";
const PMAP_VERSION: u32 = 1;
const MAX_SIDE: u32 = 1 << 15;
const MAX_FEATURE_DIM: u32 = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct Pointmap {
    height: usize,
    width: usize,
    points: Vec<Vector3<f64>>,
    mask: Vec<bool>,
}

impl Pointmap {
    pub fn new_masked(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            points: vec![Vector3::zeros(); height * width],
            mask: vec![false; height * width],
        }
    }

    /// Builds a pointmap from optional per-pixel points; `None` and
    /// non-finite points become masked pixels.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> Option<Vector3<f64>>,
    ) -> Self {
        let mut pm = Self::new_masked(height, width);
        for row in 0..height {
            for col in 0..width {
                if let Some(p) = f(row, col) {
                    pm.set(row * width + col, Some(p));
                }
            }
        }
        pm
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.mask[idx]
    }

    pub fn get(&self, idx: usize) -> Option<&Vector3<f64>> {
        self.mask[idx].then(|| &self.points[idx])
    }

    pub fn point(&self, idx: usize) -> &Vector3<f64> {
        &self.points[idx]
    }

    pub fn set(&mut self, idx: usize, p: Option<Vector3<f64>>) {
        match p {
            Some(p) if p.iter().all(|v| v.is_finite()) => {
                self.points[idx] = p;
                self.mask[idx] = true;
            }
            _ => {
                self.points[idx] = Vector3::zeros();
                self.mask[idx] = false;
            }
        }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Applies `T` to every valid point.
    pub fn transformed(&self, t: &Sim3) -> Pointmap {
        let mut out = self.clone();
        for (p, &m) in out.points.iter_mut().zip(&self.mask) {
            if m {
                *p = t.act(p);
            }
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Pointmap {
        let mut out = self.clone();
        for p in out.points.iter_mut() {
            *p *= factor;
        }
        out
    }
}

/// Per-pixel unit rays with the validity mask of their source pointmap.
#[derive(Clone, Debug)]
pub struct RayGrid {
    pub height: usize,
    pub width: usize,
    pub rays: Vec<Vector3<f64>>,
    pub mask: Vec<bool>,
}

impl RayGrid {
    pub fn ray(&self, idx: usize) -> Option<&Vector3<f64>> {
        self.mask[idx].then(|| &self.rays[idx])
    }
}

/// Normalizes every valid point; pixels within `RAY_EPSILON` of the origin are masked.
pub fn to_rays(pm: &Pointmap) -> RayGrid {
    let mut rays = vec![Vector3::zeros(); pm.len()];
    let mut mask = vec![false; pm.len()];
    for (i, p) in pm.points.iter().enumerate() {
        if !pm.mask[i] {
            continue;
        }
        let n = p.norm();
        if n > RAY_EPSILON {
            rays[i] = p / n;
            mask[i] = true;
        }
    }
    RayGrid {
        height: pm.height,
        width: pm.width,
        rays,
        mask,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ConfidenceMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    /// Non-finite or negative inputs are clamped to zero.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width);
        let values = values
            .into_iter()
            .map(|v| if v.is_finite() && v > 0.0 { v } else { 0.0 })
            .collect();
        Self {
            height,
            width,
            values,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn set(&mut self, idx: usize, v: f64) {
        self.values[idx] = if v.is_finite() && v > 0.0 { v } else { 0.0 };
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Zeroes confidence wherever the pointmap is masked.
    pub fn masked_by(mut self, pm: &Pointmap) -> Self {
        for (v, &m) in self.values.iter_mut().zip(pm.mask()) {
            if !m {
                *v = 0.0;
            }
        }
        self
    }
}

/// Per-pixel descriptors (pixel-major, `dim` values per pixel) and their confidences.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    descriptors: Vec<f64>,
    confidence: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            descriptors: vec![0.0; height * width * dim],
            confidence: vec![0.0; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn descriptor(&self, idx: usize) -> &[f64] {
        &self.descriptors[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn descriptor_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.descriptors[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn confidence(&self, idx: usize) -> f64 {
        self.confidence[idx]
    }

    pub fn set_confidence(&mut self, idx: usize, q: f64) {
        self.confidence[idx] = if q.is_finite() && q > 0.0 { q } else { 0.0 };
    }

    pub fn similarity(&self, a: usize, other: &FeatureMap, b: usize) -> f64 {
        self.descriptor(a)
            .iter()
            .zip(other.descriptor(b))
            .map(|(x, y)| x * y)
            .sum()
    }
}

/// The two-view prediction: both pointmaps are in the first view's camera frame.
#[derive(Clone, Debug)]
pub struct PredictionPair {
    /// First view's own points, `X_i^i`.
    pub points_first: Pointmap,
    /// Second view's pixels expressed in the first view's frame, `X_i^j`.
    pub points_second: Pointmap,
    pub conf_first: ConfidenceMap,
    pub conf_second: ConfidenceMap,
    pub features_first: FeatureMap,
    pub features_second: FeatureMap,
}

impl PredictionPair {
    pub fn dims(&self) -> (usize, usize) {
        self.points_first.dims()
    }

    pub fn check_dims(&self) -> Result<()> {
        let d = self.dims();
        for got in [
            self.points_second.dims(),
            self.conf_first.dims(),
            self.conf_second.dims(),
            self.features_first.dims(),
            self.features_second.dims(),
        ] {
            if got != d {
                return Err(Error::DimensionMismatch { expected: d, got });
            }
        }
        Ok(())
    }
}

/// A keyframe's fused pointmap with its accumulated per-pixel confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalPointmap {
    pub points: Pointmap,
    pub confidence: ConfidenceMap,
}

impl CanonicalPointmap {
    pub fn new(points: Pointmap, confidence: ConfidenceMap) -> Result<Self> {
        if points.dims() != confidence.dims() {
            return Err(Error::DimensionMismatch {
                expected: points.dims(),
                got: confidence.dims(),
            });
        }
        let confidence = confidence.masked_by(&points);
        Ok(Self { points, confidence })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            points: Pointmap::new_masked(height, width),
            confidence: ConfidenceMap::zeros(height, width),
        }
    }

    /// Confidence-weighted running mean of `T_kf · obs` into the canonical map.
    ///
    /// `obs` is the keyframe's content as predicted in the tracked frame `f`;
    /// `t_kf` maps frame `f` into keyframe `k`.
    pub fn fuse(&mut self, obs: &Pointmap, obs_conf: &ConfidenceMap, t_kf: &Sim3) -> Result<()> {
        let d = self.points.dims();
        for got in [obs.dims(), obs_conf.dims()] {
            if got != d {
                return Err(Error::DimensionMismatch { expected: d, got });
            }
        }
        for idx in 0..self.points.len() {
            let c_new = if obs.is_valid(idx) { obs_conf.get(idx) } else { 0.0 };
            if c_new <= 0.0 {
                continue;
            }
            let x_new = t_kf.act(obs.point(idx));
            let c_old = if self.points.is_valid(idx) {
                self.confidence.get(idx)
            } else {
                0.0
            };
            let total = c_old + c_new;
            let fused = if c_old > 0.0 {
                (self.points.point(idx) * c_old + x_new * c_new) / total
            } else {
                x_new
            };
            self.points.set(idx, Some(fused));
            self.confidence.set(idx, total);
        }
        Ok(())
    }
}

/// Free-function form of [`CanonicalPointmap::fuse`].
pub fn fuse_canonical(
    canon: &CanonicalPointmap,
    obs: &Pointmap,
    obs_conf: &ConfidenceMap,
    t_kf: &Sim3,
) -> Result<CanonicalPointmap> {
    let mut out = canon.clone();
    out.fuse(obs, obs_conf, t_kf)?;
    Ok(out)
}

/// Fraction of pixels that are valid and have confidence strictly above `threshold`.
pub fn valid_fraction(pm: &Pointmap, conf: &ConfidenceMap, threshold: f64) -> Result<f64> {
    if pm.dims() != conf.dims() {
        return Err(Error::DimensionMismatch {
            expected: pm.dims(),
            got: conf.dims(),
        });
    }
    if pm.is_empty() {
        return Ok(0.0);
    }
    let n = (0..pm.len())
        .filter(|&i| pm.is_valid(i) && conf.get(i) > threshold)
        .count();
    Ok(n as f64 / pm.len() as f64)
}

/// Writes the `PMAP` debug dump: header, then channel-planar `f32` X, C, D, Q and a byte mask.
pub fn encode_pmap(
    w: &mut ByteWriter,
    pm: &Pointmap,
    conf: &ConfidenceMap,
    features: &FeatureMap,
) -> Result<()> {
    let d = pm.dims();
    for got in [conf.dims(), features.dims()] {
        if got != d {
            return Err(Error::DimensionMismatch { expected: d, got });
        }
    }
    w.bytes(PMAP_MAGIC);
    w.u32(PMAP_VERSION);
    w.u32(pm.height as u32);
    w.u32(pm.width as u32);
    w.u32(features.dim as u32);
    for c in 0..3 {
        for p in &pm.points {
            w.f32(p[c] as f32);
        }
    }
    for &v in &conf.values {
        w.f32(v as f32);
    }
    for c in 0..features.dim {
        for idx in 0..pm.len() {
            w.f32(features.descriptor(idx)[c] as f32);
        }
    }
    for &q in &features.confidence {
        w.f32(q as f32);
    }
    for &m in &pm.mask {
        w.u8(m as u8);
    }
    Ok(())
}

pub fn decode_pmap(r: &mut ByteReader<'_>) -> Result<(Pointmap, ConfidenceMap, FeatureMap)> {
    r.expect_magic(PMAP_MAGIC)?;
    let at = r.offset();
    let version = r.u32()?;
    if version != PMAP_VERSION {
        return Err(Error::parse(at, format!("unsupported PMAP version {version}")));
    }
    let h = r.bounded_u32(MAX_SIDE, "height")? as usize;
    let w = r.bounded_u32(MAX_SIDE, "width")? as usize;
    let dim = r.bounded_u32(MAX_FEATURE_DIM, "feature dimension")? as usize;
    let n = h * w;
    let read_plane = |r: &mut ByteReader<'_>| -> Result<Vec<f64>> {
        let bytes = r.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    };
    let xs = read_plane(r)?;
    let ys = read_plane(r)?;
    let zs = read_plane(r)?;
    let c = read_plane(r)?;
    let mut features = FeatureMap::zeros(h, w, dim);
    for ch in 0..dim {
        let plane = read_plane(r)?;
        for (idx, v) in plane.into_iter().enumerate() {
            features.descriptors[idx * dim + ch] = v;
        }
    }
    let q = read_plane(r)?;
    let mask_at = r.offset();
    let mask = r.take(n)?;
    let mut pm = Pointmap::new_masked(h, w);
    for idx in 0..n {
        match mask[idx] {
            0 => {}
            1 => pm.set(idx, Some(Vector3::new(xs[idx], ys[idx], zs[idx]))),
            other => {
                return Err(Error::parse(
                    mask_at + idx,
                    format!("mask byte must be 0 or 1, got {other}"),
                ))
            }
        }
    }
    let conf = ConfidenceMap::from_values(h, w, c).masked_by(&pm);
    for (idx, v) in q.into_iter().enumerate() {
        features.set_confidence(idx, v);
    }
    Ok((pm, conf, features))
}

pub fn write_pmap_file(
    out: &mut impl Write,
    pm: &Pointmap,
    conf: &ConfidenceMap,
    features: &FeatureMap,
) -> Result<()> {
    let mut w = ByteWriter::new();
    encode_pmap(&mut w, pm, conf, features)?;
    out.write_all(&w.into_inner())?;
    Ok(())
}

pub fn read_pmap_file(input: &mut impl Read) -> Result<(Pointmap, ConfidenceMap, FeatureMap)> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    decode_pmap(&mut ByteReader::new(&buf))
}
