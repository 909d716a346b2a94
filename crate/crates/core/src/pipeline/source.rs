//! Frame streams, predictors and ground truth for a run.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use log::debug;
use serde::{Deserialize, Serialize};

use super::{PredictorSpec, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{DepthImage, Trajectory};
use crate::io::read_tum;
use crate::predictor::wire::ImagePayload;
use crate::predictor::{
    BridgeClient, CameraIntrinsics, CameraSpec, FrameId, ImageSource, OraclePredictor, Predictor, SyntheticScene,
};

/// A directory with one subdirectory per agent, holding zero-padded frame
/// images (`000000.png`, ...), an optional `groundtruth.txt` in TUM format
/// and optional 16-bit depth images under `depth/` with matching names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub camera: CameraSpec,
    /// Depth image units per metre.
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
}

fn default_depth_scale() -> f64 {
    1000.0
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
const GROUNDTRUTH_FILE: &str = "groundtruth.txt";

#[derive(Clone, Debug)]
struct DatasetAgent {
    frames: Vec<(u32, PathBuf)>,
    depth_dir: Option<PathBuf>,
    groundtruth: Option<Trajectory>,
}

fn numbered_files(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = vec![];
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let Some(index) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u32>().ok()) else {
            continue;
        };
        out.push((index, path));
    }
    out.sort();
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Config(format!("duplicate frame index {} in {}", w[0].0, dir.display())));
    }
    Ok(out)
}

fn load_dataset(cfg: &DatasetConfig) -> Result<Vec<DatasetAgent>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(&cfg.path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut agents = vec![];
    for dir in dirs {
        let frames = numbered_files(&dir)?;
        if frames.is_empty() {
            debug!("dataset: skipping {} (no frames)", dir.display());
            continue;
        }
        let gt_path = dir.join(GROUNDTRUTH_FILE);
        let groundtruth = if gt_path.is_file() {
            Some(read_tum(std::io::BufReader::new(fs::File::open(&gt_path)?))?)
        } else {
            None
        };
        let depth = dir.join("depth");
        agents.push(DatasetAgent {
            frames,
            depth_dir: depth.is_dir().then_some(depth),
            groundtruth,
        });
    }
    Ok(agents)
}

#[derive(Clone, Debug)]
enum Backend {
    Scene(Arc<SyntheticScene>),
    Dataset(Arc<Vec<DatasetAgent>>),
}

/// Resolved inputs of a run: per-agent frame streams, predictors and ground truth.
#[derive(Clone, Debug)]
pub struct Session {
    cfg: RunConfig,
    backend: Backend,
    intrinsics: CameraIntrinsics,
    agents: usize,
}

impl Session {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (backend, intrinsics, available) = match (&cfg.scene, &cfg.dataset) {
            (Some(scene), None) => {
                let s = SyntheticScene::build(scene)?;
                let n = s.trajectories.len();
                let intr = s.intrinsics;
                (Backend::Scene(Arc::new(s)), intr, n)
            }
            (None, Some(ds)) => {
                if matches!(cfg.predictor, PredictorSpec::Oracle) {
                    return Err(Error::Config("the oracle predictor needs a synthetic scene".into()));
                }
                let intr = ds.camera.intrinsics();
                intr.validate()?;
                let agents = load_dataset(ds)?;
                let n = agents.len();
                (Backend::Dataset(Arc::new(agents)), intr, n)
            }
            _ => return Err(Error::Config("exactly one of `scene` and `dataset` must be given".into())),
        };
        let agents = match cfg.agents {
            Some(n) if n > available => {
                return Err(Error::Config(format!("{n} agents requested, source has {available}")))
            }
            Some(n) => n,
            None => available,
        };
        if agents == 0 {
            return Err(Error::Config("no agents to run".into()));
        }
        Ok(Self {
            cfg,
            backend,
            intrinsics,
            agents,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn agent_count(&self) -> usize {
        self.agents
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn scene(&self) -> Option<&Arc<SyntheticScene>> {
        match &self.backend {
            Backend::Scene(s) => Some(s),
            Backend::Dataset(_) => None,
        }
    }

    /// Frame indices of `agent` in stream order.
    pub fn frames(&self, agent: u32) -> Vec<u32> {
        match &self.backend {
            Backend::Scene(s) => (0..s.trajectories.get(agent as usize).map_or(0, Vec::len) as u32).collect(),
            Backend::Dataset(d) => d.get(agent as usize).map_or(vec![], |a| a.frames.iter().map(|f| f.0).collect()),
        }
    }

    pub fn stamp(&self, frame: u32) -> f64 {
        frame as f64 / self.cfg.frame_rate
    }

    /// A fresh predictor; each agent worker gets its own.
    pub fn predictor(&self) -> Result<Box<dyn Predictor>> {
        match &self.cfg.predictor {
            PredictorSpec::Oracle => {
                let Backend::Scene(scene) = &self.backend else {
                    return Err(Error::Config("the oracle predictor needs a synthetic scene".into()));
                };
                let mut o = OraclePredictor::new(scene.clone(), self.cfg.noise, self.cfg.seed);
                for (agent, &s) in self.cfg.prediction_scale.iter().enumerate() {
                    o = o.with_agent_scale(agent as u32, s);
                }
                Ok(Box::new(o))
            }
            PredictorSpec::Bridge(addr) => {
                let images: Box<dyn ImageSource> = match &self.backend {
                    Backend::Scene(s) => Box::new(SceneImages(s.clone())),
                    Backend::Dataset(d) => Box::new(DatasetImages(d.clone())),
                };
                let timeout = Duration::from_secs_f64(self.cfg.bridge_timeout_s);
                Ok(Box::new(BridgeClient::connect(addr.as_str(), timeout, images)?))
            }
        }
    }

    /// Ground-truth trajectory of `agent` stamped like the outputs, if known.
    pub fn ground_truth(&self, agent: u32) -> Option<Trajectory> {
        match &self.backend {
            Backend::Scene(s) => {
                let poses = s.trajectories.get(agent as usize)?;
                Trajectory::from_pairs(poses.iter().enumerate().map(|(i, p)| (self.stamp(i as u32), *p))).ok()
            }
            Backend::Dataset(d) => d.get(agent as usize)?.groundtruth.clone(),
        }
    }

    /// Ground-truth depth of one frame, if known.
    pub fn ground_truth_depth(&self, frame: FrameId) -> Result<Option<DepthImage>> {
        let (h, w) = (self.intrinsics.height, self.intrinsics.width);
        match &self.backend {
            Backend::Scene(s) => {
                let Some(pose) = s.pose(frame.agent, frame.index) else { return Ok(None) };
                let depth = s.render(pose).iter().map(|hit| hit.map_or(0.0, |h| h.depth)).collect();
                Ok(Some(DepthImage { height: h, width: w, depth }))
            }
            Backend::Dataset(d) => {
                let Some(agent) = d.get(frame.agent as usize) else { return Ok(None) };
                let Some(dir) = &agent.depth_dir else { return Ok(None) };
                let Some((_, image)) = agent.frames.iter().find(|f| f.0 == frame.index) else { return Ok(None) };
                let path = dir.join(image.file_name().unwrap()).with_extension("png");
                if !path.is_file() {
                    return Ok(None);
                }
                let img = image::open(&path).map_err(|e| image_error(&path, e))?.to_luma16();
                if (img.height() as usize, img.width() as usize) != (h, w) {
                    return Err(Error::DimensionMismatch {
                        expected: (h, w),
                        got: (img.height() as usize, img.width() as usize),
                    });
                }
                let scale = self.cfg.dataset.as_ref().map_or(default_depth_scale(), |d| d.depth_scale);
                let depth = img.pixels().map(|p| p.0[0] as f64 / scale).collect();
                Ok(Some(DepthImage { height: h, width: w, depth }))
            }
        }
    }
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(e) => Error::Io(e),
        other => Error::Config(format!("{}: {other}", path.display())),
    }
}

/// Shaded renders of a synthetic scene, for running a bridge model on it.
struct SceneImages(Arc<SyntheticScene>);

impl ImageSource for SceneImages {
    fn image(&self, frame: FrameId) -> Result<ImagePayload> {
        let scene = &self.0;
        let pose = scene.pose(frame.agent, frame.index).ok_or_else(|| Error::UnknownFrame(frame.to_string()))?;
        let intr = &scene.intrinsics;
        let mut desc = vec![0.0; scene.features.dim()];
        let mut data = Vec::with_capacity(intr.pixel_count() * 3);
        for hit in scene.render(pose) {
            let rgb = match hit {
                Some(hit) => {
                    scene.features.descriptor_into(&hit.world, &mut desc);
                    let shade = 1.0 / (1.0 + 0.15 * hit.depth);
                    [0, 1, 2].map(|c| ((0.5 + 2.0 * desc[c]).clamp(0.0, 1.0) * shade * 255.0).round() as u8)
                }
                None => [0; 3],
            };
            data.extend_from_slice(&rgb);
        }
        Ok(ImagePayload {
            height: intr.height as u32,
            width: intr.width as u32,
            channels: 3,
            data,
        })
    }
}

struct DatasetImages(Arc<Vec<DatasetAgent>>);

impl ImageSource for DatasetImages {
    fn image(&self, frame: FrameId) -> Result<ImagePayload> {
        let path = self
            .0
            .get(frame.agent as usize)
            .and_then(|a| a.frames.iter().find(|f| f.0 == frame.index))
            .map(|f| f.1.clone())
            .ok_or_else(|| Error::UnknownFrame(frame.to_string()))?;
        let img = image::open(&path).map_err(|e| image_error(&path, e))?.to_rgb8();
        Ok(ImagePayload {
            height: img.height(),
            width: img.width(),
            channels: 3,
            data: img.into_raw(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::SceneConfig;

    fn dataset_config(dir: &Path) -> RunConfig {
        RunConfig {
            predictor: PredictorSpec::Bridge("127.0.0.1:1".into()),
            dataset: Some(DatasetConfig {
                path: dir.to_path_buf(),
                camera: CameraSpec { width: 4, height: 3, ..Default::default() },
                depth_scale: 1000.0,
            }),
            ..RunConfig::default()
        }
    }

    #[test]
    fn dataset_layout_is_discovered() {
        let dir = tempfile::tempdir().unwrap();
        for (agent, frames) in [("a", &[0u32, 2, 1][..]), ("b", &[5][..])] {
            let d = dir.path().join(agent);
            fs::create_dir_all(d.join("depth")).unwrap();
            for &f in frames {
                image::RgbImage::new(4, 3).save(d.join(format!("{f:06}.png"))).unwrap();
            }
            fs::write(d.join("notes.md"), "ignored").unwrap();
        }
        let depth = image::ImageBuffer::<image::Luma<u16>, _>::from_fn(4, 3, |x, _| image::Luma([x as u16 * 500]));
        depth.save(dir.path().join("a/depth/000001.png")).unwrap();
        fs::write(dir.path().join("a").join(GROUNDTRUTH_FILE), "0 0 0 0 0 0 0 1\n1 1 0 0 0 0 0 1\n").unwrap();

        let s = Session::new(dataset_config(dir.path())).unwrap();
        assert_eq!(s.agent_count(), 2);
        assert_eq!(s.frames(0), vec![0, 1, 2]);
        assert_eq!(s.frames(1), vec![5]);
        assert_eq!(s.ground_truth(0).unwrap().len(), 2);
        assert!(s.ground_truth(1).is_none());
        let d = s.ground_truth_depth(FrameId::new(0, 1)).unwrap().unwrap();
        assert_eq!(&d.depth[..4], &[0.0, 0.5, 1.0, 1.5]);
        assert!(s.ground_truth_depth(FrameId::new(0, 0)).unwrap().is_none());
        let img = DatasetImages(match &s.backend {
            Backend::Dataset(d) => d.clone(),
            _ => unreachable!(),
        })
        .image(FrameId::new(1, 5))
        .unwrap();
        assert_eq!((img.height, img.width, img.data.len()), (3, 4, 36));
    }

    #[test]
    fn oracle_needs_a_scene() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = dataset_config(dir.path());
        cfg.predictor = PredictorSpec::Oracle;
        assert!(matches!(Session::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_agents_is_a_config_error() {
        let cfg = RunConfig {
            scene: Some(SceneConfig::demo_room(vec![])),
            ..RunConfig::default()
        };
        assert!(matches!(Session::new(cfg), Err(Error::Config(_))));
        let cfg = RunConfig {
            scene: Some(SceneConfig::demo_loop(5)),
            agents: Some(0),
            ..RunConfig::default()
        };
        assert!(matches!(Session::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn scene_images_shade_hits() {
        let scene = Arc::new(SyntheticScene::build(&SceneConfig::demo_loop(4)).unwrap());
        let img = SceneImages(scene.clone()).image(FrameId::new(0, 2)).unwrap();
        assert_eq!(img.data.len(), scene.intrinsics.pixel_count() * 3);
        assert!(img.data.iter().any(|&v| v > 0));
        assert!(SceneImages(scene).image(FrameId::new(0, 9)).is_err());
    }
}
