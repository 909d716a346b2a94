use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::geometry::{Rotation, Sim3};

/// A planar rectangle `center + a·half_u + b·half_v`, `|a|, |b| ≤ 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub center: Vector3<f64>,
    pub half_u: Vector3<f64>,
    pub half_v: Vector3<f64>,
}

impl Rect {
    /// Ray parameter of the hit, if any.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let normal = self.half_u.cross(&self.half_v);
        let denom = dir.dot(&normal);
        if denom.abs() < 1e-15 {
            return None;
        }
        let t = (self.center - origin).dot(&normal) / denom;
        if !(t > 1e-9) {
            return None;
        }
        let d = origin + dir * t - self.center;
        let a = d.dot(&self.half_u) / self.half_u.norm_squared();
        let b = d.dot(&self.half_v) / self.half_v.norm_squared();
        (a.abs() <= 1.0 && b.abs() <= 1.0).then_some(t)
    }

    /// Euclidean distance from `p` to the rectangle.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.center;
        let a = (d.dot(&self.half_u) / self.half_u.norm_squared()).clamp(-1.0, 1.0);
        let b = (d.dot(&self.half_v) / self.half_v.norm_squared()).clamp(-1.0, 1.0);
        (d - self.half_u * a - self.half_v * b).norm()
    }
}

/// Six faces of an axis-aligned box.
fn box_faces(center: Vector3<f64>, size: Vector3<f64>) -> [Rect; 6] {
    let h = size / 2.0;
    let (ex, ey, ez) = (Vector3::x() * h.x, Vector3::y() * h.y, Vector3::z() * h.z);
    [
        Rect { center: center + ex, half_u: ey, half_v: ez },
        Rect { center: center - ex, half_u: ey, half_v: ez },
        Rect { center: center + ey, half_u: ex, half_v: ez },
        Rect { center: center - ey, half_u: ex, half_v: ez },
        Rect { center: center + ez, half_u: ex, half_v: ey },
        Rect { center: center - ez, half_u: ex, half_v: ey },
    ]
}

/// Deterministic appearance field over world points.
///
/// Each descriptor has two halves, normalized jointly to unit length. The
/// first is smooth value noise on a coarse lattice: random vectors at lattice
/// vertices, trilinearly interpolated, so nearby surfaces share appearance and
/// distant ones decorrelate (this drives place recognition). The second is
/// random Fourier features at centimetre wavelengths (this drives pixel-level
/// matching). Points are quantized to a 1 mm grid first, so the same world
/// point yields the same descriptor from every view.
#[derive(Clone, Debug)]
pub struct FeatureField {
    seed: u64,
    coarse_dim: usize,
    freqs: Vec<Vector3<f64>>,
    phases: Vec<f64>,
}

/// Lattice spacing of the coarse half, in metres.
pub const FEATURE_LATTICE: f64 = 3.5;

fn lattice_hash(seed: u64, cell: [i64; 3], channel: usize) -> f64 {
    let mut x = seed;
    for v in [cell[0] as u64, cell[1] as u64, cell[2] as u64, channel as u64] {
        x = x.wrapping_add(v).wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    (x >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

impl FeatureField {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 4 || dim % 4 != 0 {
            return Err(Error::Config(format!("feature dimension must be a multiple of 4, got {dim}")));
        }
        let coarse_dim = dim / 2;
        let pairs = dim / 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut freqs = Vec::with_capacity(pairs);
        let mut phases = Vec::with_capacity(pairs);
        for _ in 0..pairs {
            let dir = loop {
                let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                let n = v.norm();
                if n > 0.1 && n <= 1.0 {
                    break v / n;
                }
            };
            freqs.push(dir * rng.random_range(10.0..25.0));
            phases.push(rng.random_range(0.0..2.0 * PI));
        }
        Ok(Self {
            seed,
            coarse_dim,
            freqs,
            phases,
        })
    }

    pub fn dim(&self) -> usize {
        self.coarse_dim + self.freqs.len() * 2
    }

    pub fn descriptor_into(&self, world: &Vector3<f64>, out: &mut [f64]) {
        let q = (world * 1000.0).map(f64::round) / 1000.0;
        let g = q / FEATURE_LATTICE;
        let base = g.map(f64::floor);
        let t = g - base;
        let (coarse, fine) = out.split_at_mut(self.coarse_dim);
        coarse.fill(0.0);
        for corner in 0..8 {
            let bit = |k: usize| (corner >> k) & 1;
            let w: f64 = (0..3).map(|k| if bit(k) == 1 { t[k] } else { 1.0 - t[k] }).product();
            if w == 0.0 {
                continue;
            }
            let cell = [0, 1, 2].map(|k| base[k] as i64 + bit(k) as i64);
            for (ch, o) in coarse.iter_mut().enumerate() {
                *o += w * lattice_hash(self.seed, cell, ch);
            }
        }
        for (k, (w, b)) in self.freqs.iter().zip(&self.phases).enumerate() {
            let (s, c) = (w.dot(&q) + b).sin_cos();
            fine[2 * k] = c;
            fine[2 * k + 1] = s;
        }
        let coarse_norm = coarse.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        let fine_norm = (self.freqs.len() as f64).sqrt();
        for v in coarse.iter_mut() {
            *v /= coarse_norm * std::f64::consts::SQRT_2;
        }
        for v in fine.iter_mut() {
            *v /= fine_norm * std::f64::consts::SQRT_2;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    #[serde(default)]
    pub cx: Option<f64>,
    #[serde(default)]
    pub cy: Option<f64>,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            width: 96,
            height: 72,
            fx: 80.0,
            fy: 80.0,
            cx: None,
            cy: None,
        }
    }
}

impl CameraSpec {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx.unwrap_or((self.width as f64 - 1.0) / 2.0),
            cy: self.cy.unwrap_or((self.height as f64 - 1.0) / 2.0),
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LookMode {
    /// Camera looks away from the circle centre.
    #[default]
    Outward,
    /// Camera looks towards the circle centre.
    Inward,
    /// Camera looks along the direction of travel.
    Tangent,
}

/// One agent's ground-truth camera path. The world frame is z-up; cameras
/// look horizontally with optional pitch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AgentPath {
    Circle {
        center: [f64; 3],
        radius: f64,
        #[serde(default)]
        start_deg: f64,
        #[serde(default = "full_turn")]
        sweep_deg: f64,
        frames: usize,
        #[serde(default)]
        look: LookMode,
        #[serde(default)]
        yaw_offset_deg: f64,
        #[serde(default)]
        pitch_deg: f64,
    },
    Static {
        position: [f64; 3],
        yaw_deg: f64,
        #[serde(default)]
        pitch_deg: f64,
        frames: usize,
    },
    /// Piecewise-linear interpolation of `[x, y, z, yaw_deg]` waypoints.
    Waypoints {
        points: Vec<[f64; 4]>,
        frames: usize,
        #[serde(default)]
        pitch_deg: f64,
    },
}

fn full_turn() -> f64 {
    360.0
}

/// World-from-camera pose for a horizontal camera at `position` with the given yaw and pitch.
pub fn look_pose(position: Vector3<f64>, yaw: f64, pitch: f64) -> Sim3 {
    let forward = Vector3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), pitch.sin());
    let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
    let down = forward.cross(&right);
    let r = Matrix3::from_columns(&[right, down, forward]);
    Sim3::from_rotation_translation(Rotation::from_matrix(&r), position)
}

impl AgentPath {
    pub fn frames(&self) -> usize {
        match self {
            AgentPath::Circle { frames, .. }
            | AgentPath::Static { frames, .. }
            | AgentPath::Waypoints { frames, .. } => *frames,
        }
    }

    pub fn poses(&self) -> Result<Vec<Sim3>> {
        match self {
            AgentPath::Circle {
                center,
                radius,
                start_deg,
                sweep_deg,
                frames,
                look,
                yaw_offset_deg,
                pitch_deg,
            } => {
                let c = Vector3::from(*center);
                Ok((0..*frames)
                    .map(|i| {
                        let a = (start_deg + sweep_deg * i as f64 / *frames as f64).to_radians();
                        let pos = c + Vector3::new(a.cos(), a.sin(), 0.0) * *radius;
                        let base = match look {
                            LookMode::Outward => a,
                            LookMode::Inward => a + PI,
                            LookMode::Tangent => a + PI / 2.0 * sweep_deg.signum(),
                        };
                        look_pose(pos, base + yaw_offset_deg.to_radians(), pitch_deg.to_radians())
                    })
                    .collect())
            }
            AgentPath::Static {
                position,
                yaw_deg,
                pitch_deg,
                frames,
            } => {
                let p = look_pose(Vector3::from(*position), yaw_deg.to_radians(), pitch_deg.to_radians());
                Ok(vec![p; *frames])
            }
            AgentPath::Waypoints {
                points,
                frames,
                pitch_deg,
            } => {
                if points.is_empty() {
                    return Err(Error::Config("waypoint path needs at least one point".into()));
                }
                let segs = points.len().saturating_sub(1).max(1);
                Ok((0..*frames)
                    .map(|i| {
                        let s = if *frames > 1 {
                            i as f64 / (*frames - 1) as f64 * segs as f64
                        } else {
                            0.0
                        };
                        let k = (s.floor() as usize).min(points.len().saturating_sub(2));
                        let f = if points.len() > 1 { s - k as f64 } else { 0.0 };
                        let a = points[k];
                        let b = points[(k + 1).min(points.len() - 1)];
                        let lerp = |j: usize| a[j] + (b[j] - a[j]) * f;
                        look_pose(
                            Vector3::new(lerp(0), lerp(1), lerp(2)),
                            lerp(3).to_radians(),
                            pitch_deg.to_radians(),
                        )
                    })
                    .collect())
            }
        }
    }
}

/// Declarative description of a synthetic world: rooms (seen from inside),
/// boxes (seen from outside) and one camera path per agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default)]
    pub camera: CameraSpec,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_feature_seed")]
    pub feature_seed: u64,
    #[serde(default)]
    pub rooms: Vec<BoxSpec>,
    #[serde(default)]
    pub boxes: Vec<BoxSpec>,
    pub agents: Vec<AgentPath>,
}

fn default_feature_dim() -> usize {
    crate::pointmap::DEFAULT_FEATURE_DIM
}

fn default_feature_seed() -> u64 {
    0x5eed
}

impl SceneConfig {
    /// A 6 m × 6 m × 3 m room with three pillars.
    pub fn demo_room(agents: Vec<AgentPath>) -> Self {
        Self {
            camera: CameraSpec::default(),
            feature_dim: default_feature_dim(),
            feature_seed: default_feature_seed(),
            rooms: vec![BoxSpec {
                center: [0.0, 0.0, 1.5],
                size: [6.0, 6.0, 3.0],
            }],
            boxes: vec![
                BoxSpec { center: [1.9, 1.2, 0.6], size: [0.6, 0.6, 1.2] },
                BoxSpec { center: [-1.6, 1.7, 1.0], size: [0.5, 0.8, 2.0] },
                BoxSpec { center: [0.4, -2.0, 0.45], size: [1.2, 0.5, 0.9] },
                BoxSpec { center: [-2.1, -1.0, 0.8], size: [0.4, 0.4, 1.6] },
            ],
            agents,
        }
    }

    /// Single agent circling the demo room once while looking outward.
    pub fn demo_loop(frames: usize) -> Self {
        Self::demo_room(vec![AgentPath::Circle {
            center: [0.0, 0.0, 1.4],
            radius: 0.6,
            start_deg: 0.0,
            sweep_deg: 360.0,
            frames,
            look: LookMode::Outward,
            yaw_offset_deg: 0.0,
            pitch_deg: 0.0,
        }])
    }
}

/// Result of casting one pixel ray into the scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderHit {
    /// Depth along the camera z axis.
    pub depth: f64,
    pub world: Vector3<f64>,
}

/// A built scene: surfaces, per-agent ground-truth trajectories and the appearance field.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub intrinsics: CameraIntrinsics,
    pub surfaces: Vec<Rect>,
    pub trajectories: Vec<Vec<Sim3>>,
    pub features: FeatureField,
}

/// Fraction of trajectory poses that must see some geometry.
const MIN_COVERAGE: f64 = 0.8;

impl SyntheticScene {
    pub fn build(config: &SceneConfig) -> Result<Self> {
        let intrinsics = config.camera.intrinsics();
        intrinsics.validate()?;
        let mut surfaces = Vec::new();
        for b in config.rooms.iter().chain(&config.boxes) {
            if b.size.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config(format!("box size must be positive: {b:?}")));
            }
            surfaces.extend(box_faces(Vector3::from(b.center), Vector3::from(b.size)));
        }
        let trajectories = config
            .agents
            .iter()
            .map(|a| a.poses())
            .collect::<Result<Vec<_>>>()?;
        let scene = Self {
            intrinsics,
            surfaces,
            trajectories,
            features: FeatureField::new(config.feature_dim, config.feature_seed)?,
        };
        scene.check_coverage()?;
        Ok(scene)
    }

    pub fn from_parts(
        intrinsics: CameraIntrinsics,
        surfaces: Vec<Rect>,
        trajectories: Vec<Vec<Sim3>>,
        features: FeatureField,
    ) -> Self {
        Self {
            intrinsics,
            surfaces,
            trajectories,
            features,
        }
    }

    fn check_coverage(&self) -> Result<()> {
        for (agent, traj) in self.trajectories.iter().enumerate() {
            if traj.is_empty() {
                continue;
            }
            let probe = [
                (self.intrinsics.height / 2, self.intrinsics.width / 2),
                (0, 0),
                (0, self.intrinsics.width - 1),
                (self.intrinsics.height - 1, 0),
                (self.intrinsics.height - 1, self.intrinsics.width - 1),
            ];
            let seen = traj
                .iter()
                .filter(|pose| probe.iter().any(|&(r, c)| self.cast_pixel(pose, r, c).is_some()))
                .count();
            if (seen as f64) < MIN_COVERAGE * traj.len() as f64 {
                return Err(Error::Config(format!(
                    "agent {agent}: scene geometry visible from only {seen} of {} poses",
                    traj.len()
                )));
            }
        }
        Ok(())
    }

    pub fn pose(&self, agent: u32, index: u32) -> Option<&Sim3> {
        self.trajectories.get(agent as usize)?.get(index as usize)
    }

    /// Nearest positive hit along a world ray.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        self.surfaces
            .iter()
            .filter_map(|s| s.intersect(origin, dir))
            .min_by(f64::total_cmp)
    }

    /// Casts the ray through pixel centre `(row, col)` from a world-from-camera pose.
    pub fn cast_pixel(&self, pose: &Sim3, row: usize, col: usize) -> Option<RenderHit> {
        let dir_cam = self.intrinsics.pixel_direction(row, col);
        let dir = pose.rotation().rotate(&dir_cam);
        let t = self.cast(pose.translation(), &dir)?;
        Some(RenderHit {
            depth: t,
            world: pose.translation() + dir * t,
        })
    }

    /// Whether `world` is the first surface seen from the camera at `pose`
    /// and projects inside its image.
    pub fn visible_from(&self, pose: &Sim3, world: &Vector3<f64>) -> bool {
        let cam = pose.inverse().act(world);
        let Some((u, v)) = self.intrinsics.project(&cam) else {
            return false;
        };
        if !self.intrinsics.contains(u, v) {
            return false;
        }
        let offset = world - pose.translation();
        let dist = offset.norm();
        match self.cast(pose.translation(), &(offset / dist)) {
            Some(t) => t >= dist * (1.0 - 1e-6) - 1e-9,
            None => false,
        }
    }

    /// Noise-free render: per-pixel hit or miss, row-major.
    pub fn render(&self, pose: &Sim3) -> Vec<Option<RenderHit>> {
        let (h, w) = (self.intrinsics.height, self.intrinsics.width);
        let mut out = Vec::with_capacity(h * w);
        for row in 0..h {
            for col in 0..w {
                out.push(self.cast_pixel(pose, row, col));
            }
        }
        out
    }
}
