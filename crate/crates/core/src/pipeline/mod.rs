//! Run configuration and end-to-end orchestration: agent workers, the
//! submap handoff, server fusion, output files and reports.

mod source;

pub use source::{DatasetConfig, Session};

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use log::{error, info, warn};
use serde::{Deserialize, Serialize};

use crate::agent::{run_agent, AgentConfig, AgentOutput};
use crate::error::{Error, Result};
use crate::evaluation::{
    align_umeyama, ate_rmse, backproject_gt, geometry_metrics, icp_align, GeometryMetrics, IcpConfig, PointCloud,
    Trajectory, DEFAULT_METRIC_THRESHOLD,
};
use crate::geometry::Sim3;
use crate::io::{read_ply, read_tum, write_ply, write_tum};
use crate::keyframing::{read_submap_file, write_submap_file, Submap};
use crate::predictor::{AgentPath, FrameId, LookMode, NoiseModel, SceneConfig};
use crate::server::{FusionReport, Server, ServerConfig};

/// Which predictor the agents and the server use.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PredictorSpec {
    #[default]
    Oracle,
    /// `host:port` of a server speaking the wire protocol.
    Bridge(String),
}

impl FromStr for PredictorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            _ if s == "oracle" => Ok(Self::Oracle),
            Some(("bridge", addr)) if !addr.is_empty() => Ok(Self::Bridge(addr.to_string())),
            _ => Err(Error::Config(format!("predictor must be `oracle` or `bridge:<address>`, got `{s}`"))),
        }
    }
}

impl TryFrom<String> for PredictorSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PredictorSpec> for String {
    fn from(p: PredictorSpec) -> String {
        p.to_string()
    }
}

impl fmt::Display for PredictorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Oracle => f.write_str("oracle"),
            Self::Bridge(addr) => write!(f, "bridge:{addr}"),
        }
    }
}

/// Everything a run depends on. Written as TOML; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Frames per second of the input streams; output timestamps are `frame / frame_rate`.
    pub frame_rate: f64,
    pub output: PathBuf,
    pub predictor: PredictorSpec,
    /// Runs only the first `agents` streams of the source.
    pub agents: Option<usize>,
    pub scene: Option<SceneConfig>,
    pub dataset: Option<DatasetConfig>,
    pub noise: NoiseModel,
    /// Per-agent factor applied to the oracle's predictions.
    pub prediction_scale: Vec<f64>,
    pub agent: AgentConfig,
    pub server: ServerConfig,
    pub icp: IcpConfig,
    pub metric_threshold: f64,
    pub bridge_timeout_s: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frame_rate: 30.0,
            output: PathBuf::from("out"),
            predictor: PredictorSpec::Oracle,
            agents: None,
            scene: None,
            dataset: None,
            noise: NoiseModel::default(),
            prediction_scale: vec![],
            agent: AgentConfig::default(),
            server: ServerConfig::default(),
            icp: IcpConfig::default(),
            metric_threshold: DEFAULT_METRIC_THRESHOLD,
            bridge_timeout_s: 30.0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let offset = e.span().map_or(0, |s| s.start);
            Error::Config(format!("at byte {offset}: {}", e.message()))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(Error::Config(format!("frame_rate must be positive, got {}", self.frame_rate)));
        }
        if !(self.metric_threshold > 0.0) {
            return Err(Error::Config("metric_threshold must be positive".into()));
        }
        if !(self.bridge_timeout_s > 0.0) {
            return Err(Error::Config("bridge_timeout_s must be positive".into()));
        }
        if let Some(s) = self.prediction_scale.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Config(format!("prediction scale {s} is not positive")));
        }
        self.noise.validate()
    }
}

/// A demo-room scene with `agents` cameras circling the room centre; agent
/// `a` starts at `a · 360/agents` degrees and sweeps 240 degrees, so
/// neighbouring agents overlap.
pub fn overlapping_scene(agents: usize, frames: usize) -> SceneConfig {
    SceneConfig::demo_room(
        (0..agents)
            .map(|a| AgentPath::Circle {
                center: [0.0, 0.0, 1.4],
                radius: 0.6,
                start_deg: a as f64 * 360.0 / agents as f64,
                sweep_deg: 240.0,
                frames,
                look: LookMode::Outward,
                yaw_offset_deg: 0.0,
                pitch_deg: 0.0,
            })
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentSummary {
    pub agent: u32,
    pub frames_in: usize,
    pub frames_tracked: usize,
    pub skipped: usize,
    pub keyframes: usize,
    pub loop_edges: usize,
    pub wall_time: Duration,
    pub fps: f64,
}

impl AgentSummary {
    fn of(agent: u32, out: &AgentOutput) -> Self {
        let s = &out.stats;
        Self {
            agent,
            frames_in: s.frames_in,
            frames_tracked: s.frames_tracked,
            skipped: s.skipped,
            keyframes: s.keyframes,
            loop_edges: s.loop_edges,
            wall_time: s.wall_time,
            fps: s.fps(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub ate: BTreeMap<u32, f64>,
    /// All agents under one alignment.
    pub combined_ate: Option<f64>,
    pub geometry: Option<GeometryMetrics>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Ok,
    /// Some agents failed or could not be fused; each is named with a reason.
    Partial(Vec<(u32, String)>),
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub status: RunStatus,
    pub agents: Vec<AgentSummary>,
    pub fusion: Option<FusionReport>,
    pub metrics: Option<Metrics>,
    pub files: Vec<PathBuf>,
    pub wall_time: Duration,
}

pub fn submap_path(dir: &Path, agent: u32) -> PathBuf {
    dir.join(format!("agent{agent}.smap"))
}

pub fn trajectory_path(dir: &Path, agent: u32) -> PathBuf {
    dir.join(format!("agent{agent}.tum"))
}

pub fn agent_cloud_path(dir: &Path, agent: u32) -> PathBuf {
    dir.join(format!("agent{agent}.ply"))
}

pub fn global_cloud_path(dir: &Path) -> PathBuf {
    dir.join("global.ply")
}

fn component_cloud_path(dir: &Path, component: usize) -> PathBuf {
    dir.join(format!("component{component}.ply"))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn save_tum(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = create(path)?;
    write_tum(&mut w, traj)?;
    w.flush()?;
    Ok(())
}

fn save_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = create(path)?;
    write_ply(&mut w, cloud)?;
    w.flush()?;
    Ok(())
}

fn stamped(session: &Session, poses: Vec<(u32, Sim3)>) -> Result<Trajectory> {
    Trajectory::from_pairs(poses.into_iter().map(|(f, p)| (session.stamp(f), p)))
}

/// Runs one agent and writes its submap plus its local trajectory and cloud.
pub fn run_single_agent(session: &Session, agent: u32, out: &Path) -> Result<AgentOutput> {
    fs::create_dir_all(out)?;
    let predictor = session.predictor()?;
    let output = run_agent(predictor.as_ref(), agent, &session.frames(agent), &session.config().agent)?;
    let mut w = create(&submap_path(out, agent))?;
    write_submap_file(&mut w, &output.submap)?;
    w.flush()?;
    save_tum(&trajectory_path(out, agent), &stamped(session, output.frame_poses())?)?;
    let poses = output.submap.keyframes.iter().map(|k| (k.id, k.pose)).collect();
    let cloud = crate::server::export_global_map([&output.submap], &poses, session.config().server.c_export);
    save_ply(&agent_cloud_path(out, agent), &cloud)?;
    Ok(output)
}

pub struct FuseOutcome {
    pub report: FusionReport,
    pub trajectories: BTreeMap<u32, Trajectory>,
    /// The cloud of the component holding the anchor.
    pub global_cloud: PointCloud,
    pub keyframe_frames: Vec<FrameId>,
    pub unfused: Vec<u32>,
    pub files: Vec<PathBuf>,
}

/// Server stage: fuses serialized submaps and writes global trajectories and clouds.
pub fn fuse_submaps(session: &Session, submaps: &[Vec<u8>], out: &Path) -> Result<FuseOutcome> {
    fs::create_dir_all(out)?;
    let predictor = session.predictor()?;
    let mut server = Server::new(predictor.as_ref(), session.config().server.clone());
    for bytes in submaps {
        server.collect_bytes(bytes)?;
    }
    let fusion = server.fuse()?;
    let mut files = vec![];
    let mut trajectories = BTreeMap::new();
    for &agent in server.submaps().keys() {
        let traj = stamped(session, server.trajectory(agent, &fusion.poses))?;
        let path = trajectory_path(out, agent);
        save_tum(&path, &traj)?;
        files.push(path);
        trajectories.insert(agent, traj);
        let path = agent_cloud_path(out, agent);
        save_ply(&path, &server.export_cloud(&fusion.poses, &[agent]))?;
        files.push(path);
    }
    let components = &fusion.report.components;
    let global_cloud = server.export_cloud(&fusion.poses, &components[0]);
    if components.len() == 1 {
        let path = global_cloud_path(out);
        save_ply(&path, &global_cloud)?;
        files.push(path);
    } else {
        for (i, comp) in components.iter().enumerate() {
            let path = component_cloud_path(out, i);
            save_ply(&path, &server.export_cloud(&fusion.poses, comp))?;
            files.push(path);
        }
    }
    let keyframe_frames = server
        .submaps()
        .iter()
        .filter(|(a, _)| components[0].contains(a))
        .flat_map(|(_, s)| s.keyframes.iter().map(|k| k.frame))
        .collect();
    Ok(FuseOutcome {
        unfused: components[1..].iter().flatten().copied().collect(),
        report: fusion.report,
        trajectories,
        global_cloud,
        keyframe_frames,
        files,
    })
}

const AGENT_STAMP_OFFSET: f64 = 1.0e6;

/// ATE per agent and jointly, plus dense metrics of `cloud` against the
/// ground-truth depth of `keyframe_frames`. Missing ground truth yields `None`.
pub fn compute_metrics(
    session: &Session,
    trajectories: &BTreeMap<u32, Trajectory>,
    cloud: Option<&PointCloud>,
    keyframe_frames: &[FrameId],
) -> Result<Option<Metrics>> {
    let mut metrics = Metrics::default();
    let mut joint_est = vec![];
    let mut joint_gt = vec![];
    for (&agent, est) in trajectories {
        let Some(gt) = session.ground_truth(agent) else { continue };
        match ate_rmse(est, &gt) {
            Ok(v) => {
                metrics.ate.insert(agent, v);
            }
            Err(e) => warn!("metrics: agent {agent}: {e}"),
        }
        for (stamp, pose) in est.iter() {
            if let Some(g) = gt.at(stamp) {
                let s = agent as f64 * AGENT_STAMP_OFFSET + stamp;
                joint_est.push((s, *pose));
                joint_gt.push((s, *g));
            }
        }
    }
    if joint_est.is_empty() {
        return Ok(None);
    }
    let joint_est = Trajectory::from_pairs(joint_est)?;
    let joint_gt = Trajectory::from_pairs(joint_gt)?;
    let alignment = match align_umeyama(&joint_est, &joint_gt) {
        Ok(t) => t,
        Err(e) => {
            warn!("metrics: {e}");
            return Ok(Some(metrics));
        }
    };
    metrics.combined_ate = ate_rmse(&joint_est, &joint_gt).ok();

    let Some(cloud) = cloud.filter(|c| !c.is_empty()) else { return Ok(Some(metrics)) };
    let mut depths = vec![];
    let mut poses = vec![];
    for &f in keyframe_frames {
        let gt_pose = session.ground_truth(f.agent).and_then(|t| t.at(session.stamp(f.index)).copied());
        if let (Some(d), Some(p)) = (session.ground_truth_depth(f)?, gt_pose) {
            depths.push(d);
            poses.push(p);
        }
    }
    if depths.is_empty() {
        return Ok(Some(metrics));
    }
    let gt_cloud = backproject_gt(&depths, &poses, session.intrinsics())?;
    let est = cloud.transformed(&alignment);
    let cfg = session.config();
    match icp_align(&est, &gt_cloud, &Sim3::identity(), &cfg.icp) {
        Ok(refine) => {
            metrics.geometry = geometry_metrics(&est.transformed(&refine), &gt_cloud, cfg.metric_threshold).ok();
        }
        Err(e) => warn!("metrics: {e}"),
    }
    Ok(Some(metrics))
}

/// Runs every agent concurrently, fuses their submaps on the server and
/// writes trajectories, clouds and reports into the configured output directory.
pub fn run_system(cfg: &RunConfig) -> Result<RunReport> {
    let start = Instant::now();
    let session = Session::new(cfg.clone())?;
    let out = cfg.output.as_path();
    fs::create_dir_all(out)?;
    let n = session.agent_count() as u32;
    info!("run: {n} agents, predictor {}", cfg.predictor);

    let results: Vec<Result<AgentOutput>> = std::thread::scope(|scope| {
        let workers: Vec<_> = (0..n)
            .map(|agent| {
                let session = &session;
                scope.spawn(move || {
                    let predictor = session.predictor()?;
                    run_agent(predictor.as_ref(), agent, &session.frames(agent), &session.config().agent)
                })
            })
            .collect();
        workers
            .into_iter()
            .enumerate()
            .map(|(agent, w)| {
                w.join().unwrap_or_else(|_| {
                    Err(Error::AgentFailure {
                        agent: agent as u32,
                        reason: "worker panicked".into(),
                    })
                })
            })
            .collect()
    });

    let mut failed = vec![];
    let mut summaries = vec![];
    let mut handoff = vec![];
    let mut files = vec![];
    for (agent, result) in (0..n).zip(results) {
        match result {
            Ok(output) => {
                summaries.push(AgentSummary::of(agent, &output));
                let mut bytes = vec![];
                write_submap_file(&mut bytes, &output.submap)?;
                let path = submap_path(out, agent);
                fs::write(&path, &bytes)?;
                files.push(path);
                handoff.push(bytes);
            }
            Err(e @ (Error::Config(_) | Error::Io(_) | Error::PredictorUnavailable(_))) => return Err(e),
            Err(e) => {
                error!("run: agent {agent} failed: {e}");
                failed.push((agent, e.to_string()));
            }
        }
    }
    if handoff.is_empty() {
        return Err(Error::AgentFailure {
            agent: failed[0].0,
            reason: format!("all agents failed; first: {}", failed[0].1),
        });
    }

    let fused = fuse_submaps(&session, &handoff, out)?;
    files.extend(fused.files.iter().cloned());
    for &agent in &fused.unfused {
        failed.push((agent, "no inter-agent loop links it to the anchor agent".into()));
    }
    let metrics = compute_metrics(&session, &fused.trajectories, Some(&fused.global_cloud), &fused.keyframe_frames)?;

    let mut report = RunReport {
        status: if failed.is_empty() { RunStatus::Ok } else { RunStatus::Partial(failed) },
        agents: summaries,
        fusion: Some(fused.report),
        metrics,
        files,
        wall_time: Duration::ZERO,
    };
    report.wall_time = start.elapsed();
    write_reports(out, &report)?;
    report.files.push(out.join("report.txt"));
    if report.metrics.is_some() {
        report.files.push(out.join("metrics.txt"));
        report.files.push(out.join("metrics.csv"));
    }
    Ok(report)
}

/// Loads the outputs of an earlier run from `dir` and evaluates them.
pub fn evaluate_outputs(session: &Session, dir: &Path) -> Result<Option<Metrics>> {
    let mut trajectories = BTreeMap::new();
    let mut keyframe_frames = vec![];
    for agent in 0..session.agent_count() as u32 {
        let path = trajectory_path(dir, agent);
        if !path.is_file() {
            continue;
        }
        trajectories.insert(agent, read_tum(BufReader::new(fs::File::open(&path)?))?);
        let smap = submap_path(dir, agent);
        if smap.is_file() {
            let submap: Submap = read_submap_file(&mut BufReader::new(fs::File::open(&smap)?))?;
            keyframe_frames.extend(submap.keyframes.iter().map(|k| k.frame));
        }
    }
    let global = global_cloud_path(dir);
    let cloud = if global.is_file() {
        Some(read_ply(&mut BufReader::new(fs::File::open(&global)?))?)
    } else {
        None
    };
    compute_metrics(session, &trajectories, cloud.as_ref(), &keyframe_frames)
}

pub fn render_metrics(m: &Metrics) -> String {
    let mut s = String::new();
    for (agent, ate) in &m.ate {
        writeln!(s, "ate_rmse_m.agent{agent} = {ate:.6}").unwrap();
    }
    if let Some(v) = m.combined_ate {
        writeln!(s, "ate_rmse_m.combined = {v:.6}").unwrap();
    }
    if let Some(g) = &m.geometry {
        writeln!(s, "accuracy_m = {:.6}", g.accuracy).unwrap();
        writeln!(s, "completion_m = {:.6}", g.completion).unwrap();
        writeln!(s, "chamfer_m = {:.6}", g.chamfer).unwrap();
    }
    s
}

/// Per-agent ATE rows followed by an average row.
pub fn render_metrics_table(m: &Metrics) -> String {
    let mut s = String::from("agent,ate_rmse_cm\n");
    for (agent, ate) in &m.ate {
        writeln!(s, "{agent},{:.3}", ate * 100.0).unwrap();
    }
    if !m.ate.is_empty() {
        let avg = m.ate.values().sum::<f64>() / m.ate.len() as f64;
        writeln!(s, "average,{:.3}", avg * 100.0).unwrap();
    }
    s
}

pub fn render_report(r: &RunReport) -> String {
    let mut s = String::new();
    match &r.status {
        RunStatus::Ok => writeln!(s, "status = ok").unwrap(),
        RunStatus::Partial(failed) => {
            writeln!(s, "status = partial").unwrap();
            for (agent, reason) in failed {
                writeln!(s, "failed.agent{agent} = {reason:?}").unwrap();
            }
        }
    }
    for a in &r.agents {
        let p = format!("agent{}", a.agent);
        writeln!(s, "{p}.frames_in = {}", a.frames_in).unwrap();
        writeln!(s, "{p}.frames_tracked = {}", a.frames_tracked).unwrap();
        writeln!(s, "{p}.skipped = {}", a.skipped).unwrap();
        writeln!(s, "{p}.keyframes = {}", a.keyframes).unwrap();
        writeln!(s, "{p}.local_loop_edges = {}", a.loop_edges).unwrap();
        writeln!(s, "{p}.wall_s = {:.3}", a.wall_time.as_secs_f64()).unwrap();
        writeln!(s, "{p}.fps = {:.2}", a.fps).unwrap();
    }
    if let Some(f) = &r.fusion {
        writeln!(s, "server.edges.temporal = {}", f.temporal_edges).unwrap();
        writeln!(s, "server.edges.intra_loop = {}", f.intra_loop_edges).unwrap();
        writeln!(s, "server.edges.inter_loop = {}", f.inter_loop_edges).unwrap();
        writeln!(s, "server.energy.initial = {:.9e}", f.initial_energy).unwrap();
        writeln!(s, "server.energy.final = {:.9e}", f.final_energy).unwrap();
        writeln!(s, "server.iterations = {}", f.iterations).unwrap();
        writeln!(s, "server.components = {:?}", f.components).unwrap();
        writeln!(s, "server.wall_s = {:.3}", f.wall_time.as_secs_f64()).unwrap();
    }
    let tracked: usize = r.agents.iter().map(|a| a.frames_tracked).sum();
    writeln!(s, "total.frames_tracked = {tracked}").unwrap();
    writeln!(s, "total.wall_s = {:.3}", r.wall_time.as_secs_f64()).unwrap();
    let secs = r.wall_time.as_secs_f64();
    writeln!(s, "total.fps = {:.2}", if secs > 0.0 { tracked as f64 / secs } else { 0.0 }).unwrap();
    if let Some(m) = &r.metrics {
        s.push_str(&render_metrics(m));
    }
    s
}

fn write_reports(dir: &Path, r: &RunReport) -> Result<()> {
    fs::write(dir.join("report.txt"), render_report(r))?;
    if let Some(m) = &r.metrics {
        fs::write(dir.join("metrics.txt"), render_metrics(m))?;
        fs::write(dir.join("metrics.csv"), render_metrics_table(m))?;
    }
    Ok(())
}
