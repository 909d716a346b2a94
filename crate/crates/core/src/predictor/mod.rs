//! The two-view pointmap prior and its implementations.
//!
//! A [`Predictor`] takes two frame ids and returns the eight grids of a
//! [`PredictionPair`], both pointmaps expressed in the first frame. The
//! in-process [`OraclePredictor`] ray-casts a [`SyntheticScene`]; the
//! [`BridgeClient`] forwards frames to an external model over the wire
//! protocol in [`wire`].

mod bridge;
mod oracle;
mod scene;
pub mod wire;

pub use bridge::{BridgeClient, ImageSource};
pub use oracle::{synthetic_render, NoiseModel, OraclePredictor};
pub use scene::{
    AgentPath, BoxSpec, CameraSpec, FeatureField, LookMode, Rect, RenderHit, SceneConfig,
    SyntheticScene,
};

use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointmap::{ConfidenceMap, FeatureMap, Pointmap, PredictionPair};

/// Identifies one image of one agent's stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameId {
    pub agent: u32,
    pub index: u32,
}

impl FrameId {
    pub fn new(agent: u32, index: u32) -> Self {
        Self { agent, index }
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "agent{}/frame{}", self.agent, self.index)
    }
}

/// Pinhole intrinsics. Pixel `(row, col)` has its centre at `u = col`, `v = row`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid camera intrinsics {self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Camera-frame direction with unit z through the centre of `(row, col)`.
    pub fn pixel_direction(&self, row: usize, col: usize) -> Vector3<f64> {
        Vector3::new(
            (col as f64 - self.cx) / self.fx,
            (row as f64 - self.cy) / self.fy,
            1.0,
        )
    }

    /// Continuous `(u, v)` pixel coordinates of a camera-frame point, if in front.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 1e-12 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Whether continuous coordinates fall on a pixel of the image.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }
}

/// Single-view prediction used to seed the first keyframe.
#[derive(Clone, Debug)]
pub struct MonocularPrediction {
    pub points: Pointmap,
    pub confidence: ConfidenceMap,
    pub features: FeatureMap,
}

/// A two-view 3D prior.
pub trait Predictor: Send + Sync {
    /// Predicts both views in the coordinate frame of `first`.
    fn predict(&self, first: FrameId, second: FrameId) -> Result<PredictionPair>;

    fn monocular_init(&self, frame: FrameId) -> Result<MonocularPrediction> {
        let pair = self.predict(frame, frame)?;
        Ok(MonocularPrediction {
            points: pair.points_first,
            confidence: pair.conf_first,
            features: pair.features_first,
        })
    }
}
