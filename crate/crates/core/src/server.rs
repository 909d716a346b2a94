//! Post-hoc fusion of agent submaps into one global map.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::frame_poses;
use crate::codec::ByteReader;
use crate::error::{Error, Result};
use crate::evaluation::PointCloud;
use crate::geometry::Sim3;
use crate::keyframing::{
    decode_submap, optimize_graph, verify_loop, Edge, EdgeKind, FactorGraph, GraphConfig, GraphReport, Keyframe,
    KeyframeConfig, KeyframeId, LoopConfig, RetrievalDatabase, Submap, VerifiedLoop,
};
use crate::matching::{correspond, MatchConfig};
use crate::pointmap::Pointmap;
use crate::predictor::Predictor;
use crate::tracking::TrackingConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    pub matching: MatchConfig,
    pub tracking: TrackingConfig,
    pub keyframing: KeyframeConfig,
    pub loops: LoopConfig,
    pub graph: GraphConfig,
    /// Canonical pixels with confidence below this are left out of exported clouds.
    pub c_export: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FusionReport {
    pub keyframes_per_agent: BTreeMap<u32, usize>,
    pub temporal_edges: usize,
    pub intra_loop_edges: usize,
    pub inter_loop_edges: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub iterations: usize,
    /// Agent groups optimized separately; one group when every agent is linked.
    pub components: Vec<Vec<u32>>,
    pub wall_time: Duration,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    /// Keyframe poses after pre-alignment, before the global solve.
    pub initial_poses: BTreeMap<KeyframeId, Sim3>,
    pub poses: BTreeMap<KeyframeId, Sim3>,
    pub report: FusionReport,
}

/// Global keyframe buffer, retrieval database and the temporal chains.
pub struct Server<'p> {
    predictor: &'p dyn Predictor,
    cfg: ServerConfig,
    submaps: BTreeMap<u32, Submap>,
    db: RetrievalDatabase,
    graph: FactorGraph,
}

impl<'p> Server<'p> {
    pub fn new(predictor: &'p dyn Predictor, cfg: ServerConfig) -> Self {
        Self {
            predictor,
            cfg,
            submaps: BTreeMap::new(),
            db: RetrievalDatabase::new(),
            graph: FactorGraph::new(),
        }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn submaps(&self) -> &BTreeMap<u32, Submap> {
        &self.submaps
    }

    /// Local graph with the temporal chains; loop edges are added by [`Server::fuse`].
    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn keyframe(&self, id: KeyframeId) -> Option<&Keyframe> {
        self.submaps.get(&id.agent)?.keyframes.iter().find(|k| k.id == id)
    }

    fn points(&self, id: KeyframeId) -> Option<&Pointmap> {
        self.keyframe(id).map(|k| &k.canonical.points)
    }

    pub fn collect_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let submap = decode_submap(&mut ByteReader::new(bytes))?;
        self.collect(submap)
    }

    /// Registers a submap and rebuilds its temporal chain through the predictor.
    pub fn collect(&mut self, submap: Submap) -> Result<()> {
        if self.submaps.contains_key(&submap.agent) {
            return Err(Error::DuplicateAgent(submap.agent));
        }
        let mut kfs: Vec<&Keyframe> = submap.keyframes.iter().collect();
        kfs.sort_by_key(|k| k.id);
        let pairs: Vec<(&Keyframe, &Keyframe)> = kfs.windows(2).map(|w| (w[0], w[1])).collect();
        let edges: Vec<Edge> = pairs
            .par_iter()
            .map(|(prev, next)| {
                let pair = self.predictor.predict(next.frame, prev.frame)?;
                Ok(Edge {
                    a: prev.id,
                    b: next.id,
                    matches: correspond(&pair, &self.cfg.matching),
                    kind: EdgeKind::Temporal,
                })
            })
            .collect::<Result<_>>()?;
        for kf in &kfs {
            self.graph.add_node(kf.id, kf.pose);
            self.db.insert(kf.id, kf.descriptor.clone());
        }
        for e in edges {
            self.graph.add_edge(e, 0).expect("temporal edges are not gated");
        }
        info!("server: collected agent {} with {} keyframes", submap.agent, kfs.len());
        self.submaps.insert(submap.agent, submap);
        Ok(())
    }

    /// Retrieval plus geometric verification over all keyframes.
    pub fn detect_loops(&self) -> Result<Vec<VerifiedLoop>> {
        let kc = &self.cfg.keyframing;
        let mut pairs = BTreeSet::new();
        for submap in self.submaps.values() {
            for kf in &submap.keyframes {
                let id = kf.id;
                let adjacent = |o: KeyframeId| o.agent == id.agent && o.seq.abs_diff(id.seq) <= 1;
                let intra = self.db.query(id, &kf.descriptor, kc.k, kc.s_min, |o| o.agent == id.agent && !adjacent(o));
                let inter = self.db.query(
                    id,
                    &kf.descriptor,
                    kc.k,
                    kc.s_min + self.cfg.loops.inter_agent_margin,
                    |o| o.agent != id.agent,
                );
                for (other, _) in intra.into_iter().chain(inter) {
                    pairs.insert((id.max(other), id.min(other)));
                }
            }
        }
        let pairs: Vec<_> = pairs.into_iter().collect();
        let verified: Vec<Option<VerifiedLoop>> = pairs
            .par_iter()
            .map(|&(i, j)| {
                let (ki, kj) = (self.keyframe(i).unwrap(), self.keyframe(j).unwrap());
                verify_loop(
                    self.predictor,
                    ki,
                    kj,
                    kc.e_min,
                    &self.cfg.matching,
                    &self.cfg.tracking,
                    &self.cfg.loops,
                )
            })
            .collect::<Result<_>>()?;
        let found: Vec<VerifiedLoop> = verified.into_iter().flatten().collect();
        info!(
            "server: {} candidate pairs, {} verified loops",
            pairs.len(),
            found.len()
        );
        Ok(found)
    }

    /// Full fusion: loop detection, pre-alignment and the global solve.
    ///
    /// Agents that cannot be linked to the anchor are optimized as separate
    /// components; the report lists them.
    pub fn fuse(&self) -> Result<Fusion> {
        let start = Instant::now();
        let loops = self.detect_loops()?;
        let mut graph = self.graph.clone();
        for l in &loops {
            if let Err(e) = graph.add_edge(l.edge.clone(), self.cfg.keyframing.e_min) {
                warn!("server: {e}");
            }
        }
        let components = agent_components(self.submaps.keys().copied(), &loops);
        let mut report = FusionReport {
            keyframes_per_agent: self.submaps.iter().map(|(a, s)| (*a, s.keyframes.len())).collect(),
            temporal_edges: graph.count(EdgeKind::Temporal),
            intra_loop_edges: graph.count(EdgeKind::IntraLoop),
            inter_loop_edges: graph.count(EdgeKind::InterLoop),
            components: components.clone(),
            ..Default::default()
        };
        if components.len() > 1 {
            warn!("server: agents split into components {components:?}; emitting one map per component");
        }
        let mut poses = BTreeMap::new();
        let mut initial_poses = BTreeMap::new();
        for comp in &components {
            let transforms = prealign(comp, &loops, |id| self.keyframe(id).map(|k| k.pose));
            let mut sub = FactorGraph::new();
            for (id, local) in graph.nodes() {
                if let Some(s) = transforms.get(&id.agent) {
                    sub.add_node(*id, s.compose(local));
                }
            }
            for e in graph.edges() {
                if transforms.contains_key(&e.a.agent) && transforms.contains_key(&e.b.agent) {
                    sub.add_edge(e.clone(), 0).unwrap();
                }
            }
            if let Some(anchor) = sub.nodes().keys().next().copied() {
                sub.set_anchor(anchor);
            }
            initial_poses.extend(sub.nodes().iter().map(|(k, p)| (*k, *p)));
            let r = optimize_global(&mut sub, |id| self.points(id), &self.cfg)?;
            report.initial_energy += r.initial_energy;
            report.final_energy += r.final_energy;
            report.iterations += r.iterations;
            poses.extend(sub.nodes().iter().map(|(k, p)| (*k, *p)));
        }
        report.wall_time = start.elapsed();
        Ok(Fusion { initial_poses, poses, report })
    }

    /// Each keyframe's confident canonical points in the global frame.
    pub fn export_cloud(&self, poses: &BTreeMap<KeyframeId, Sim3>, agents: &[u32]) -> PointCloud {
        export_global_map(
            self.submaps.values().filter(|s| agents.contains(&s.agent)),
            poses,
            self.cfg.c_export,
        )
    }

    /// Per-frame global poses of one agent.
    pub fn trajectory(&self, agent: u32, poses: &BTreeMap<KeyframeId, Sim3>) -> Vec<(u32, Sim3)> {
        match self.submaps.get(&agent) {
            Some(s) => frame_poses(s, |kf| poses.get(&kf.id).copied().unwrap_or(kf.pose)),
            None => vec![],
        }
    }
}

/// Global solve over a graph whose gauge anchor is already set.
///
/// Fails with [`Error::UnfusedAgents`] when some agents are not linked to the anchor.
pub fn optimize_global<'a>(
    graph: &mut FactorGraph,
    points: impl Fn(KeyframeId) -> Option<&'a Pointmap>,
    cfg: &ServerConfig,
) -> Result<GraphReport> {
    let comps = graph.components();
    if comps.len() > 1 {
        let anchor = graph.anchor();
        let mut unlinked: Vec<u32> = comps
            .iter()
            .filter(|c| !anchor.is_some_and(|a| c.contains(&a)))
            .flatten()
            .map(|k| k.agent)
            .collect();
        unlinked.dedup();
        return Err(Error::UnfusedAgents(unlinked));
    }
    optimize_graph(graph, points, &cfg.graph, &cfg.tracking)
}

/// Groups agents connected by inter-agent loops, each sorted, smallest first.
pub fn agent_components(agents: impl IntoIterator<Item = u32>, loops: &[VerifiedLoop]) -> Vec<Vec<u32>> {
    let mut left: BTreeSet<u32> = agents.into_iter().collect();
    let mut out = vec![];
    while let Some(&start) = left.iter().next() {
        left.remove(&start);
        let mut comp = vec![start];
        let mut i = 0;
        while i < comp.len() {
            let a = comp[i];
            for l in loops {
                for (x, y) in [(l.edge.a.agent, l.edge.b.agent), (l.edge.b.agent, l.edge.a.agent)] {
                    if x == a && left.remove(&y) {
                        comp.push(y);
                    }
                }
            }
            i += 1;
        }
        comp.sort();
        out.push(comp);
    }
    out
}

/// World-from-local transform per agent of `component`, chaining each
/// unplaced agent to the placed set through its strongest inter-agent loop.
pub fn prealign(
    component: &[u32],
    loops: &[VerifiedLoop],
    local_pose: impl Fn(KeyframeId) -> Option<Sim3>,
) -> BTreeMap<u32, Sim3> {
    let mut out = BTreeMap::new();
    let Some(&anchor) = component.first() else { return out };
    out.insert(anchor, Sim3::identity());
    let score = |l: &VerifiedLoop| l.edge.matches.len() as f64 * l.inlier_fraction;
    loop {
        let best = loops
            .iter()
            .filter(|l| {
                let (a, b) = (l.edge.a.agent, l.edge.b.agent);
                a != b && component.contains(&a) && component.contains(&b) && (out.contains_key(&a) != out.contains_key(&b))
            })
            .max_by(|x, y| score(x).total_cmp(&score(y)).then(y.edge.a.cmp(&x.edge.a)).then(y.edge.b.cmp(&x.edge.b)));
        let Some(l) = best else { break };
        let (a, b) = (l.edge.a, l.edge.b);
        let (Some(la), Some(lb)) = (local_pose(a), local_pose(b)) else { break };
        // rel = G_a⁻¹·G_b
        if let Some(sa) = out.get(&a.agent).copied() {
            let gb = sa.compose(&la).compose(&l.relative);
            out.insert(b.agent, gb.compose(&lb.inverse()));
        } else {
            let sb = out[&b.agent];
            let ga = sb.compose(&lb).compose(&l.relative.inverse());
            out.insert(a.agent, ga.compose(&la.inverse()));
        }
    }
    out
}

/// Concatenates every keyframe's canonical points, moved by its global pose.
pub fn export_global_map<'a>(
    submaps: impl IntoIterator<Item = &'a Submap>,
    poses: &BTreeMap<KeyframeId, Sim3>,
    c_export: f64,
) -> PointCloud {
    let mut points = vec![];
    let mut conf = vec![];
    for s in submaps {
        for kf in &s.keyframes {
            let pose = poses.get(&kf.id).copied().unwrap_or(kf.pose);
            let c = &kf.canonical;
            for idx in 0..c.points.len() {
                if let Some(p) = c.points.get(idx) {
                    let q = c.confidence.get(idx);
                    if q >= c_export {
                        points.push(pose.act(p));
                        conf.push(q);
                    }
                }
            }
        }
    }
    PointCloud {
        points,
        confidence: Some(conf),
    }
}
