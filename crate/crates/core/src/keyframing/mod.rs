//! Keyframes, the insertion test, retrieval and the agent-local factor graph.

mod graph;
mod submap;
mod verify;

pub use graph::{graph_energy, optimize_graph, Edge, EdgeKind, EdgeRejected, FactorGraph, GraphConfig, GraphReport};
pub use submap::{decode_submap, encode_submap, read_submap_file, write_submap_file, FrameRecord, Submap};
pub use verify::{verify_loop, LoopConfig, VerifiedLoop};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::Sim3;
use crate::matching::MatchStats;
use crate::pointmap::{CanonicalPointmap, FeatureMap};
use crate::predictor::FrameId;

/// Keyframe identity: agent plus a per-agent sequence number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyframeId {
    pub agent: u32,
    pub seq: u32,
}

impl KeyframeId {
    pub fn new(agent: u32, seq: u32) -> Self {
        Self { agent, seq }
    }

    /// The keyframe inserted just before this one by the same agent.
    pub fn predecessor(&self) -> Option<KeyframeId> {
        self.seq.checked_sub(1).map(|seq| KeyframeId::new(self.agent, seq))
    }
}

impl fmt::Display for KeyframeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "agent{}/kf{}", self.agent, self.seq)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub frame: FrameId,
    pub canonical: CanonicalPointmap,
    pub features: FeatureMap,
    /// World-from-keyframe pose.
    pub pose: Sim3,
    pub descriptor: Vec<f64>,
}

impl Keyframe {
    pub fn new(id: KeyframeId, frame: FrameId, canonical: CanonicalPointmap, features: FeatureMap, pose: Sim3) -> Self {
        let descriptor = compute_retrieval_descriptor(&features);
        Self {
            id,
            frame,
            canonical,
            features,
            pose,
            descriptor,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeyframeConfig {
    /// Insert when the fraction of matched pixels drops below this.
    pub f_min: f64,
    /// Insert when the matched count drops below this; `None` means `H·W/20`.
    pub n_min: Option<usize>,
    /// Retrieval candidates per query.
    pub k: usize,
    pub s_min: f64,
    /// Minimum matches for a non-temporal edge.
    pub e_min: usize,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        Self {
            f_min: 0.33,
            n_min: None,
            k: 3,
            s_min: 0.85,
            e_min: 100,
        }
    }
}

impl KeyframeConfig {
    pub fn n_min_for(&self, pixels: usize) -> usize {
        self.n_min.unwrap_or(pixels / 20)
    }
}

/// True iff either statistic falls below its threshold.
pub fn should_insert_keyframe(stats: &MatchStats, f_min: f64, n_min: usize) -> bool {
    stats.valid_fraction < f_min || stats.matched_count < n_min
}

/// Unit-norm confidence-weighted mean of the per-pixel descriptors.
pub fn compute_retrieval_descriptor(features: &FeatureMap) -> Vec<f64> {
    let (h, w) = features.dims();
    let mut acc = vec![0.0; features.dim()];
    for idx in 0..h * w {
        let q = features.confidence(idx);
        if q <= 0.0 {
            continue;
        }
        for (a, d) in acc.iter_mut().zip(features.descriptor(idx)) {
            *a += q * d;
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        acc.iter_mut().for_each(|v| *v /= norm);
    }
    acc
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Brute-force cosine-similarity index over keyframe descriptors.
#[derive(Clone, Debug, Default)]
pub struct RetrievalDatabase {
    entries: BTreeMap<KeyframeId, Vec<f64>>,
}

impl RetrievalDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: KeyframeId, descriptor: Vec<f64>) {
        self.entries.insert(id, descriptor);
    }

    /// Up to `k` ids with similarity at least `s_min`, most similar first.
    ///
    /// Never returns `id` itself or its immediate predecessor; `filter`
    /// restricts candidates further.
    pub fn query(
        &self,
        id: KeyframeId,
        descriptor: &[f64],
        k: usize,
        s_min: f64,
        filter: impl Fn(KeyframeId) -> bool,
    ) -> Vec<(KeyframeId, f64)> {
        let pred = id.predecessor();
        let mut hits: Vec<(KeyframeId, f64)> = self
            .entries
            .iter()
            .filter(|(other, _)| **other != id && Some(**other) != pred && filter(**other))
            .map(|(other, d)| (*other, cosine(descriptor, d)))
            .filter(|(_, s)| *s >= s_min)
            .collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits.truncate(k);
        hits
    }
}

/// Retrieval over an agent's own keyframes, as used during local mapping.
pub fn query_retrieval(db: &RetrievalDatabase, kf: &Keyframe, k: usize, s_min: f64) -> Vec<KeyframeId> {
    db.query(kf.id, &kf.descriptor, k, s_min, |_| true)
        .into_iter()
        .map(|(id, _)| id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{AgentPath, NoiseModel, OraclePredictor, Predictor, SceneConfig, SyntheticScene};
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn insertion_examples() {
        let s = |f, n| MatchStats { valid_fraction: f, matched_count: n };
        assert!(!should_insert_keyframe(&s(0.9, 10_000), 0.33, 1000));
        assert!(should_insert_keyframe(&s(0.2, 10_000), 0.33, 1000));
        assert!(should_insert_keyframe(&s(0.9, 500), 0.33, 1000));
    }

    proptest! {
        #[test]
        fn insertion_is_monotone(f in 0.0f64..1.0, n in 0usize..20_000, df in 0.0f64..1.0, dn in 0usize..20_000) {
            let hi = MatchStats { valid_fraction: f, matched_count: n };
            let lo = MatchStats { valid_fraction: (f - df).max(0.0), matched_count: n.saturating_sub(dn) };
            if should_insert_keyframe(&hi, 0.33, 1000) {
                prop_assert!(should_insert_keyframe(&lo, 0.33, 1000));
            }
        }
    }

    #[test]
    fn descriptor_of_identical_features() {
        let mut fm = FeatureMap::zeros(2, 3, 4);
        for idx in 0..6 {
            fm.descriptor_mut(idx).copy_from_slice(&[1.0, 2.0, 0.0, 2.0]);
            fm.set_confidence(idx, 0.5 + idx as f64);
        }
        let d = compute_retrieval_descriptor(&fm);
        let expected = [1.0 / 3.0, 2.0 / 3.0, 0.0, 2.0 / 3.0];
        for (a, b) in d.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn descriptor_of(o: &OraclePredictor, agent: u32, index: u32) -> Vec<f64> {
        compute_retrieval_descriptor(&o.monocular_init(FrameId::new(agent, index)).unwrap().features)
    }

    #[test]
    fn descriptor_repeatability_and_disjoint_regions() {
        let cfg = SceneConfig::demo_room(vec![
            AgentPath::Static { position: [0.0, 0.0, 1.4], yaw_deg: 0.0, pitch_deg: 0.0, frames: 2 },
            AgentPath::Static { position: [0.0, 0.0, 1.4], yaw_deg: 180.0, pitch_deg: 0.0, frames: 1 },
        ]);
        let s = SyntheticScene::build(&cfg).unwrap();
        let o = OraclePredictor::new(Arc::new(s), NoiseModel { depth_sigma: 0.01, ..Default::default() }, 3);
        let a = descriptor_of(&o, 0, 0);
        let b = descriptor_of(&o, 0, 1);
        let c = descriptor_of(&o, 1, 0);
        assert!(cosine(&a, &b) > 0.99);
        assert!(cosine(&a, &c) < 0.5, "disjoint similarity {}", cosine(&a, &c));
    }

    #[test]
    fn retrieval_finds_revisited_viewpoint() {
        let cfg = SceneConfig::demo_loop(120);
        let s = SyntheticScene::build(&cfg).unwrap();
        let o = OraclePredictor::new(Arc::new(s), NoiseModel::noiseless(), 3);
        let mut db = RetrievalDatabase::new();
        // keyframes every 12 frames over the loop; the last revisits the first
        let frames: Vec<u32> = (0..10).map(|k| k * 12).chain([119]).collect();
        for (seq, &f) in frames.iter().enumerate() {
            db.insert(KeyframeId::new(0, seq as u32), descriptor_of(&o, 0, f));
        }
        let last = KeyframeId::new(0, frames.len() as u32 - 1);
        let hits = db.query(last, &descriptor_of(&o, 0, 119), 3, 0.5, |_| true);
        assert_eq!(hits[0].0, KeyframeId::new(0, 0));
        assert!(hits.iter().all(|(id, _)| *id != last && Some(*id) != last.predecessor()));
    }

    #[test]
    fn retrieval_edge_cases() {
        let db = RetrievalDatabase::new();
        assert!(db.query(KeyframeId::new(0, 1), &[1.0, 0.0], 3, 0.0, |_| true).is_empty());
        let mut db = RetrievalDatabase::new();
        for seq in 0..5 {
            db.insert(KeyframeId::new(0, seq), vec![1.0, 0.0]);
        }
        let id = KeyframeId::new(0, 4);
        assert!(db.query(id, &[1.0, 0.0], 3, 1.0 + 1e-9, |_| true).is_empty());
        let hits = db.query(id, &[1.0, 0.0], 10, 0.0, |_| true);
        assert_eq!(hits.iter().map(|h| h.0.seq).collect::<Vec<_>>(), vec![0, 1, 2]);
    }
}
