//! One agent's tracking and local mapping loop.

use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Sim3, Tangent};
use crate::keyframing::{
    optimize_graph, query_retrieval, should_insert_keyframe, verify_loop, Edge, EdgeKind, FactorGraph, FrameRecord,
    GraphConfig, GraphReport, Keyframe, KeyframeConfig, KeyframeId, LoopConfig, RetrievalDatabase, Submap,
};
use crate::matching::{correspond, match_stats, MatchConfig};
use crate::pointmap::CanonicalPointmap;
use crate::predictor::{FrameId, Predictor};
use crate::tracking::{estimate_relative_pose, TrackingConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub matching: MatchConfig,
    pub tracking: TrackingConfig,
    pub keyframing: KeyframeConfig,
    pub loops: LoopConfig,
    pub graph: GraphConfig,
    /// Disables the per-keyframe local graph solve (loop edges are still recorded).
    pub disable_local_optimization: bool,
    /// Tangent perturbation composed onto every new keyframe pose, to emulate odometry drift.
    pub drift: Option<[f64; 7]>,
}

/// Consecutive skipped frames tolerated before the agent gives up.
pub const MAX_CONSECUTIVE_SKIPS: usize = 10;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AgentStats {
    pub frames_in: usize,
    pub frames_tracked: usize,
    pub skipped: usize,
    pub keyframes: usize,
    pub loop_edges: usize,
    pub rejected_edges: usize,
    pub tracking_iterations: usize,
    /// Accepted tracking iterations that raised the energy; zero when the solver behaves.
    pub energy_increases: usize,
    pub graph_reports: Vec<GraphReport>,
    pub predict_time: Duration,
    pub track_time: Duration,
    pub wall_time: Duration,
}

impl AgentStats {
    pub fn fps(&self) -> f64 {
        let s = self.wall_time.as_secs_f64();
        if s > 0.0 {
            self.frames_tracked as f64 / s
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug)]
pub struct AgentOutput {
    pub submap: Submap,
    pub graph: FactorGraph,
    pub stats: AgentStats,
}

impl AgentOutput {
    /// World-from-camera pose of every tracked frame.
    pub fn frame_poses(&self) -> Vec<(u32, Sim3)> {
        frame_poses(&self.submap, |kf| kf.pose)
    }
}

/// Frame poses from keyframe poses chosen by `pose_of` and the recorded `T_kf`.
pub fn frame_poses(submap: &Submap, pose_of: impl Fn(&Keyframe) -> Sim3) -> Vec<(u32, Sim3)> {
    submap
        .frames
        .iter()
        .filter_map(|f| {
            let kf = submap.keyframes.iter().find(|k| k.id.seq == f.keyframe_seq)?;
            Some((f.frame, pose_of(kf).compose(&f.relative)))
        })
        .collect()
}

fn drift_of(cfg: &AgentConfig) -> Sim3 {
    cfg.drift.map_or_else(Sim3::identity, |d| Sim3::exp(&Tangent::from_slice(&d)))
}

/// Tracks `frames` of `agent` in order and builds its submap.
pub fn run_agent(predictor: &dyn Predictor, agent: u32, frames: &[u32], cfg: &AgentConfig) -> Result<AgentOutput> {
    let start = Instant::now();
    let Some((&first, rest)) = frames.split_first() else {
        return Err(Error::Config(format!("agent {agent}: empty frame stream")));
    };
    let mut stats = AgentStats {
        frames_in: frames.len(),
        ..Default::default()
    };
    let t = Instant::now();
    let init = predictor.monocular_init(FrameId::new(agent, first))?;
    stats.predict_time += t.elapsed();
    let kf0 = Keyframe::new(
        KeyframeId::new(agent, 0),
        FrameId::new(agent, first),
        CanonicalPointmap::new(init.points, init.confidence)?,
        init.features,
        Sim3::identity(),
    );
    let pixels = kf0.canonical.points.len();
    let n_min = cfg.keyframing.n_min_for(pixels);
    let drift = drift_of(cfg);

    let mut graph = FactorGraph::new();
    graph.add_node(kf0.id, kf0.pose);
    graph.set_anchor(kf0.id);
    let mut db = RetrievalDatabase::new();
    db.insert(kf0.id, kf0.descriptor.clone());
    let mut keyframes = vec![kf0];
    let mut records = vec![FrameRecord {
        frame: first,
        keyframe_seq: 0,
        relative: Sim3::identity(),
    }];
    stats.frames_tracked = 1;
    let mut t_kf = Sim3::identity();
    let mut consecutive_skips = 0;

    for &index in rest {
        let frame = FrameId::new(agent, index);
        let current = keyframes.last_mut().unwrap();
        let t = Instant::now();
        let pair = predictor.predict(frame, current.frame)?;
        stats.predict_time += t.elapsed();

        let t = Instant::now();
        let matches = correspond(&pair, &cfg.matching);
        let match_info = match_stats(&matches, pixels);
        let tracked = estimate_relative_pose(&current.canonical.points, &pair.points_first, &matches, &t_kf, &cfg.tracking);
        stats.track_time += t.elapsed();
        let result = match tracked {
            Ok(r) => r,
            Err(e @ (Error::DegenerateGeometry(_) | Error::Underconstrained(_))) => {
                stats.skipped += 1;
                consecutive_skips += 1;
                warn!("agent {agent}: skipping frame {index}: {e}");
                if consecutive_skips > MAX_CONSECUTIVE_SKIPS {
                    return Err(Error::AgentFailure {
                        agent,
                        reason: format!("{consecutive_skips} consecutive frames failed to track"),
                    });
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        consecutive_skips = 0;
        stats.frames_tracked += 1;
        stats.tracking_iterations += result.iterations;
        stats.energy_increases += result.energy_trace.windows(2).filter(|w| w[1] > w[0]).count();
        t_kf = result.pose;
        current.canonical.fuse(&pair.points_second, &pair.conf_second, &t_kf)?;

        if !should_insert_keyframe(&match_info, cfg.keyframing.f_min, n_min) {
            records.push(FrameRecord {
                frame: index,
                keyframe_seq: current.id.seq,
                relative: t_kf,
            });
            continue;
        }

        let prev_id = current.id;
        let id = KeyframeId::new(agent, prev_id.seq + 1);
        let pose = current.pose.compose(&t_kf).compose(&drift);
        // retrieval features come from the keyframe's own view, not the pair
        let t = Instant::now();
        let own = predictor.monocular_init(frame)?;
        stats.predict_time += t.elapsed();
        let kf = Keyframe::new(
            id,
            frame,
            CanonicalPointmap::new(pair.points_first, pair.conf_first)?,
            own.features,
            pose,
        );
        debug!("agent {agent}: keyframe {} at frame {index} ({match_info:?})", id.seq);
        records.push(FrameRecord {
            frame: index,
            keyframe_seq: id.seq,
            relative: Sim3::identity(),
        });
        t_kf = Sim3::identity();
        graph.add_node(id, pose);
        let temporal = Edge {
            a: prev_id,
            b: id,
            matches,
            kind: EdgeKind::Temporal,
        };
        graph.add_edge(temporal, cfg.keyframing.e_min).expect("temporal edges are not gated");

        let candidates = query_retrieval(&db, &kf, cfg.keyframing.k, cfg.keyframing.s_min);
        db.insert(id, kf.descriptor.clone());
        for cand in candidates {
            let other = &keyframes[cand.seq as usize];
            let verified = verify_loop(
                predictor,
                &kf,
                other,
                cfg.keyframing.e_min,
                &cfg.matching,
                &cfg.tracking,
                &cfg.loops,
            )?;
            match verified {
                Some(v) => match graph.add_edge(v.edge, cfg.keyframing.e_min) {
                    Ok(()) => {
                        info!("agent {agent}: loop {id} -> {cand}");
                        stats.loop_edges += 1;
                    }
                    Err(e) => {
                        debug!("agent {agent}: {e}");
                        stats.rejected_edges += 1;
                    }
                },
                None => stats.rejected_edges += 1,
            }
        }
        keyframes.push(kf);

        if !cfg.disable_local_optimization {
            let report = {
                let kfs = &keyframes;
                optimize_graph(
                    &mut graph,
                    |k| kfs.get(k.seq as usize).map(|kf| &kf.canonical.points),
                    &cfg.graph,
                    &cfg.tracking,
                )?
            };
            for kf in &mut keyframes {
                kf.pose = *graph.pose(kf.id).unwrap();
            }
            stats.graph_reports.push(report);
        }
    }
    stats.keyframes = keyframes.len();
    stats.wall_time = start.elapsed();
    info!(
        "agent {agent}: {} frames, {} keyframes, {} loop edges, {} skipped",
        stats.frames_tracked, stats.keyframes, stats.loop_edges, stats.skipped
    );
    Ok(AgentOutput {
        submap: Submap {
            agent,
            keyframes,
            frames: records,
        },
        graph,
        stats,
    })
}
