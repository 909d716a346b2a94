use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FrameId, Predictor, RenderHit, SyntheticScene};
use crate::error::{Error, Result};
use crate::geometry::Sim3;
use crate::pointmap::{ConfidenceMap, FeatureMap, Pointmap, PredictionPair};

/// Corruption applied by the synthetic oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    /// Relative depth noise: std of the depth error is `depth_sigma × depth`.
    #[serde(default)]
    pub depth_sigma: f64,
    /// Confidence floor for hits, and the confidence of non-covisible pixels.
    #[serde(default = "default_conf_min")]
    pub conf_min: f64,
    /// Probability that a hit pixel is dropped (masked).
    #[serde(default)]
    pub dropout: f64,
}

fn default_conf_min() -> f64 {
    0.05
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            depth_sigma: 0.0,
            conf_min: default_conf_min(),
            dropout: 0.0,
        }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.depth_sigma >= 0.0) || !(self.conf_min > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("invalid noise model {self:?}")));
        }
        Ok(())
    }

    fn confidence(&self, depth: f64) -> f64 {
        (1.0 / (1.0 + self.depth_sigma * depth)).max(self.conf_min)
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6a09_e667_f3bc_c908, |acc, &p| splitmix(acc ^ p))
}

/// Noisy render of one view with per-pixel confidence and appearance features.
///
/// Points are in the camera frame of `pose` (world-from-camera, unit scale).
/// Depth noise acts along each pixel ray, so ray directions stay exact.
pub fn synthetic_render(
    scene: &SyntheticScene,
    pose: &Sim3,
    noise: &NoiseModel,
    seed: u64,
) -> (Pointmap, ConfidenceMap, FeatureMap) {
    let hits = scene.render(pose);
    render_from_hits(scene, &hits, noise, seed)
}

fn render_from_hits(
    scene: &SyntheticScene,
    hits: &[Option<RenderHit>],
    noise: &NoiseModel,
    seed: u64,
) -> (Pointmap, ConfidenceMap, FeatureMap) {
    let intr = &scene.intrinsics;
    let (h, w) = (intr.height, intr.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pm = Pointmap::new_masked(h, w);
    let mut conf = ConfidenceMap::zeros(h, w);
    let mut feat = FeatureMap::zeros(h, w, scene.features.dim());
    for row in 0..h {
        for col in 0..w {
            let idx = row * w + col;
            // draw unconditionally so the noise stream is independent of hits
            let n: f64 = rng.sample(StandardNormal);
            let drop = rng.random::<f64>() < noise.dropout;
            let Some(hit) = hits[idx] else { continue };
            if drop {
                continue;
            }
            let depth = hit.depth * (1.0 + noise.depth_sigma * n);
            if !(depth > 0.0) {
                continue;
            }
            pm.set(idx, Some(intr.pixel_direction(row, col) * depth));
            let c = noise.confidence(hit.depth);
            conf.set(idx, c);
            scene.features.descriptor_into(&hit.world, feat.descriptor_mut(idx));
            feat.set_confidence(idx, c);
        }
    }
    (pm, conf, feat)
}

/// Deterministic in-process stand-in for a learned two-view predictor.
///
/// `predict(i, j)` renders both frames from their ground-truth poses, maps
/// frame `j`'s points into frame `i`, and lowers the confidence of pixels
/// whose surface point is not visible from the other view to `conf_min`.
#[derive(Clone, Debug)]
pub struct OraclePredictor {
    scene: Arc<SyntheticScene>,
    noise: NoiseModel,
    seed: u64,
    agent_scale: BTreeMap<u32, f64>,
}

impl OraclePredictor {
    pub fn new(scene: Arc<SyntheticScene>, noise: NoiseModel, seed: u64) -> Self {
        Self {
            scene,
            noise,
            seed,
            agent_scale: BTreeMap::new(),
        }
    }

    /// Multiplies every prediction whose first frame belongs to `agent` by `factor`.
    pub fn with_agent_scale(mut self, agent: u32, factor: f64) -> Self {
        assert!(factor > 0.0);
        self.agent_scale.insert(agent, factor);
        self
    }

    pub fn scene(&self) -> &Arc<SyntheticScene> {
        &self.scene
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    fn pose(&self, f: FrameId) -> Result<Sim3> {
        self.scene
            .pose(f.agent, f.index)
            .copied()
            .ok_or_else(|| Error::UnknownFrame(f.to_string()))
    }

    fn scale_for(&self, agent: u32) -> f64 {
        self.agent_scale.get(&agent).copied().unwrap_or(1.0)
    }

    fn view_seed(&self, first: FrameId, second: FrameId, role: u64) -> u64 {
        mix_seed(&[
            self.seed,
            first.agent as u64,
            first.index as u64,
            second.agent as u64,
            second.index as u64,
            role,
        ])
    }

    /// Sets confidence to `conf_min` where the hit is not seen by `other`.
    fn apply_covisibility(
        &self,
        hits: &[Option<RenderHit>],
        other: &Sim3,
        conf: &mut ConfidenceMap,
        feat: &mut FeatureMap,
    ) {
        for (idx, hit) in hits.iter().enumerate() {
            let Some(hit) = hit else { continue };
            if conf.get(idx) > 0.0 && !self.scene.visible_from(other, &hit.world) {
                conf.set(idx, self.noise.conf_min);
                feat.set_confidence(idx, self.noise.conf_min);
            }
        }
    }
}

impl Predictor for OraclePredictor {
    fn predict(&self, first: FrameId, second: FrameId) -> Result<PredictionPair> {
        let pose_i = self.pose(first)?;
        let pose_j = self.pose(second)?;
        let hits_i = self.scene.render(&pose_i);
        let scale = self.scale_for(first.agent);
        if first == second {
            // a self-pair is the monocular prediction repeated
            let (pm, conf, feat) =
                render_from_hits(&self.scene, &hits_i, &self.noise, self.view_seed(first, second, 0));
            let pm = if scale == 1.0 { pm } else { pm.scaled(scale) };
            return Ok(PredictionPair {
                points_first: pm.clone(),
                points_second: pm,
                conf_first: conf.clone(),
                conf_second: conf,
                features_first: feat.clone(),
                features_second: feat,
            });
        }
        let hits_j = self.scene.render(&pose_j);
        let (pm_i, mut conf_i, mut feat_i) =
            render_from_hits(&self.scene, &hits_i, &self.noise, self.view_seed(first, second, 0));
        let (pm_j, mut conf_j, mut feat_j) =
            render_from_hits(&self.scene, &hits_j, &self.noise, self.view_seed(first, second, 1));
        self.apply_covisibility(&hits_i, &pose_j, &mut conf_i, &mut feat_i);
        self.apply_covisibility(&hits_j, &pose_i, &mut conf_j, &mut feat_j);
        let rel = pose_i.inverse().compose(&pose_j);
        let (pm_i, pm_j_in_i) = if scale == 1.0 {
            (pm_i, pm_j.transformed(&rel))
        } else {
            (pm_i.scaled(scale), pm_j.transformed(&rel).scaled(scale))
        };
        Ok(PredictionPair {
            points_first: pm_i,
            points_second: pm_j_in_i,
            conf_first: conf_i,
            conf_second: conf_j,
            features_first: feat_i,
            features_second: feat_j,
        })
    }
}
