//! The two-stage run. Stage 1 tracks every frame and maps at keyframes,
//! closing loops as they are found; stage 2 extracts the surface from the
//! final map. Evaluation and output files follow.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use fgo_core::geometry::{GaussianPrimitive, PinholeCamera, RigidPose, SimilarityTransform, MIN_DEPTH};
use fgo_core::image::{DepthMap, ImageRgb};
use fgo_core::optim::{save_checkpoint, seed_gaussians, Checkpoint, MapOptimizer, OptimizeError, OptimizerConfig};
use fgo_core::render::render;
use fgo_core::surface::{extract_mesh, save_ply, ExtractionError, PlyFormat, TriangleMesh};
use fgo_core::tracking::trajectory::{save_tum, StampedPose};
use fgo_core::tracking::{
    correct_loop, detect_loop, estimate_pose, triangulate, BaConfig, Keyframe, LoopConstraint, MapPoint, Observation,
    PoseObservation, TrackingError, HUBER_K, MIN_POSE_OBSERVATIONS,
};
use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, Mode, RunConfig};
use crate::dataset::{load_color, load_dataset, load_depth, save_color, Dataset, DatasetError};
use crate::frontend::{Feature, SyntheticFrontend};
use crate::metrics::{ate_rmse, depth_l1, psnr, ssim, Alignment, MetricsError};
use crate::synthetic::{generate_synthetic_scene, SyntheticScene, SyntheticSpec, DEPTH_ALPHA};

/// Depth samples per keyframe when mapping a real RGB-D sequence.
const DATASET_POINTS_PER_KEYFRAME: usize = 400;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Directory(PathBuf),
}

impl FromStr for DataSource {
    type Err = String;

    /// `synthetic:SPEC` (see [`SyntheticSpec`]) or a dataset directory.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "synthetic" {
            return Ok(Self::Synthetic(SyntheticSpec::default()));
        }
        match s.strip_prefix("synthetic:") {
            Some(spec) => Ok(Self::Synthetic(spec.parse()?)),
            None => Ok(Self::Directory(PathBuf::from(s))),
        }
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("tracking lost: {tracked} tracked points, need {needed}")]
    Lost { tracked: usize, needed: usize },
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error(transparent)]
    Mapping(#[from] OptimizeError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: FrameError,
    },
    #[error("surface extraction: {0}")]
    Extraction(#[from] ExtractionError),
    #[error("evaluating frame {frame}: {source}")]
    Evaluation {
        frame: usize,
        #[source]
        source: MetricsError,
    },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
}

impl RunError {
    /// Stable machine-readable error class.
    pub fn class(&self) -> &'static str {
        match self {
            Self::Config(_) => "config-error",
            Self::Dataset(_) => "dataset-error",
            Self::Frame { source, .. } => match source {
                FrameError::Lost { .. } => "tracking-lost",
                FrameError::Tracking(_) => "tracking-error",
                FrameError::Mapping(_) => "mapping-error",
                FrameError::Dataset(_) => "dataset-error",
            },
            Self::Extraction(_) => "extraction-error",
            Self::Evaluation { .. } => "evaluation-error",
            Self::Unsupported(_) => "unsupported",
            Self::Output { .. } => "io-error",
        }
    }
}

fn output_error(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

enum Frames {
    Synthetic(Box<SyntheticScene>),
    Dataset {
        dataset: Dataset,
        size: Option<(usize, usize)>,
    },
}

/// Frames of either source behind one interface.
struct Sequence {
    camera: PinholeCamera,
    timestamps: Vec<f64>,
    ground_truth: Option<Vec<RigidPose>>,
    extent: f64,
    frames: Frames,
}

impl Sequence {
    fn open(source: &DataSource, config: &RunConfig) -> Result<Self, RunError> {
        let size = config.width.zip(config.height);
        let mut seq = match source {
            DataSource::Synthetic(spec) => {
                let mut spec = spec.clone();
                if let Some((w, h)) = size {
                    spec.width = w;
                    spec.height = h;
                }
                let scene = generate_synthetic_scene(&spec);
                Sequence {
                    camera: scene.camera,
                    timestamps: scene.timestamps.clone(),
                    ground_truth: Some(scene.poses.clone()),
                    extent: scene.extent,
                    frames: Frames::Synthetic(Box::new(scene)),
                }
            }
            DataSource::Directory(root) => {
                let dataset = load_dataset(root)?;
                if config.mode == Mode::Mono {
                    return Err(RunError::Unsupported(
                        "monocular runs on image datasets need a feature front-end; use rgbd mode".into(),
                    ));
                }
                let Some(gt) = dataset.ground_truth.clone() else {
                    return Err(RunError::Unsupported(
                        "image datasets are mapped along their ground-truth trajectory, which is missing".into(),
                    ));
                };
                let camera = match size {
                    Some((w, h)) => dataset.camera.rescaled(w, h),
                    None => dataset.camera,
                };
                Sequence {
                    camera,
                    timestamps: dataset.frames.iter().map(|f| f.timestamp).collect(),
                    ground_truth: Some(gt),
                    extent: 1.0,
                    frames: Frames::Dataset { dataset, size },
                }
            }
        };
        if let Some(n) = config.max_frames {
            seq.timestamps.truncate(n);
            if let Some(gt) = seq.ground_truth.as_mut() {
                gt.truncate(n);
            }
        }
        if seq.timestamps.is_empty() {
            return Err(RunError::Unsupported("no frames to process".into()));
        }
        seq.extent = match config.scene_extent {
            Some(e) => e,
            None => match &seq.frames {
                Frames::Synthetic(_) => seq.extent,
                Frames::Dataset { .. } => match seq.depth(0, config.mode)? {
                    Some(d) => depth_extent(&seq.camera, &d),
                    None => 1.0,
                },
            },
        };
        Ok(seq)
    }

    fn len(&self) -> usize {
        self.timestamps.len()
    }

    fn color(&self, k: usize) -> Result<ImageRgb, DatasetError> {
        match &self.frames {
            Frames::Synthetic(s) => Ok(s.colors[k].clone()),
            Frames::Dataset { dataset, size } => load_color(&dataset.frames[k].color, *size),
        }
    }

    /// Depth input; never read in monocular mode.
    fn depth(&self, k: usize, mode: Mode) -> Result<Option<DepthMap>, DatasetError> {
        if mode == Mode::Mono {
            return Ok(None);
        }
        self.reference_depth(k, mode)
    }

    /// Depth to score renders against: synthetic scenes always have it.
    fn reference_depth(&self, k: usize, mode: Mode) -> Result<Option<DepthMap>, DatasetError> {
        match &self.frames {
            Frames::Synthetic(s) => Ok(Some(s.depths[k].clone())),
            Frames::Dataset { dataset, size } => match (&dataset.frames[k].depth, mode) {
                (Some(p), Mode::Rgbd) => {
                    let size = size.or(Some((self.camera.width, self.camera.height)));
                    load_depth(p, dataset.depth_scale, size).map(Some)
                }
                _ => Ok(None),
            },
        }
    }
}

/// Diagonal of the bounding box of the valid depth samples in camera frame.
fn depth_extent(camera: &PinholeCamera, depth: &DepthMap) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for y in 0..depth.height {
        for x in 0..depth.width {
            let z = depth.get(x, y);
            if z > 0.0 {
                let p = camera.backproject(x as f64, y as f64, z);
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
    }
    let d = (hi - lo).norm();
    if d.is_finite() && d > 0.0 {
        d
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub frame: usize,
    pub keyframe_a: usize,
    pub keyframe_b: usize,
    pub matches: usize,
    /// Trajectory error over the frames so far, before and after correction.
    pub ate_before_m: Option<f64>,
    pub ate_after_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub index: usize,
    pub timestamp: f64,
    pub keyframe: bool,
    pub tracked_points: usize,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub depth_l1_m: Option<f64>,
}

/// The machine-readable metrics report. Contains no wall-clock values, so
/// identical inputs give identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: Mode,
    pub ate_rmse_m: Option<f64>,
    pub ate_before_loop_m: Option<f64>,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub depth_l1_m: Option<f64>,
    pub n_gaussians: usize,
    pub n_keyframes: usize,
    pub n_frames: usize,
    pub n_map_points: usize,
    pub mesh_vertices: usize,
    pub mesh_triangles: usize,
    pub scene_extent_m: f64,
    pub loop_closures: Vec<LoopRecord>,
    pub frames: Vec<FrameRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub index: usize,
    pub tracking_s: f64,
    pub mapping_s: f64,
}

/// Wall-clock times; hardware-dependent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub total_s: f64,
    pub stage1_s: f64,
    pub stage2_s: f64,
    pub evaluation_s: f64,
    pub tracking_per_frame_s: f64,
    pub mapping_per_frame_s: f64,
    pub fps: f64,
    pub frames: Vec<FrameTiming>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: RunConfig,
    pub metrics: MetricsReport,
    pub timing: TimingReport,
    pub trajectory: Vec<StampedPose>,
    pub checkpoint: Checkpoint,
    pub mesh: TriangleMesh,
    /// Evaluation renders by frame index.
    pub renders: Vec<(usize, ImageRgb)>,
}

struct FrameRecord {
    /// Index into the keyframes.
    reference: usize,
    /// Frame pose relative to its reference keyframe.
    relative: RigidPose,
    keyframe: bool,
    tracked: usize,
}

/// A landmark's current map point in the local map.
struct Track {
    point: usize,
    since: usize,
}

struct Slam<'a> {
    config: &'a RunConfig,
    seq: &'a Sequence,
    keyframes: Vec<Keyframe>,
    points: Vec<MapPoint>,
    frames: Vec<FrameRecord>,
    mapper: MapOptimizer,
    loops: Vec<LoopRecord>,
    timing: Vec<FrameTiming>,
    local: HashMap<usize, Track>,
    /// Monocular first sightings awaiting triangulation: (keyframe index, pixel).
    pending: HashMap<usize, (usize, Vector2<f64>)>,
    next_point: usize,
    last_loop: Option<usize>,
    drift: SimilarityTransform,
    sigma2: f64,
}

impl<'a> Slam<'a> {
    fn new(config: &'a RunConfig, seq: &'a Sequence) -> Result<Self, RunError> {
        let opt = OptimizerConfig {
            scene_extent: seq.extent,
            seed: config.seed,
            ..config.optimizer.clone()
        };
        let mapper = MapOptimizer::new(Vec::new(), opt).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let d = &config.tracking.drift;
        let drift = SimilarityTransform::new(
            1.0 + d.scale,
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), d.yaw),
            Vector3::from(d.translation),
        );
        let noise = config.tracking.pixel_noise;
        Ok(Self {
            config,
            seq,
            keyframes: Vec::new(),
            points: Vec::new(),
            frames: Vec::new(),
            mapper,
            loops: Vec::new(),
            timing: Vec::new(),
            local: HashMap::new(),
            pending: HashMap::new(),
            next_point: 0,
            last_loop: None,
            drift,
            sigma2: if noise > 0.0 { noise * noise } else { 1.0 },
        })
    }

    fn mode(&self) -> Mode {
        self.config.mode
    }

    fn pose(&self, k: usize) -> RigidPose {
        let f = &self.frames[k];
        f.relative.compose(&self.keyframes[f.reference].pose)
    }

    fn poses(&self) -> Vec<RigidPose> {
        (0..self.frames.len()).map(|k| self.pose(k)).collect()
    }

    fn alignment(&self) -> Alignment {
        match self.mode() {
            Mode::Mono => Alignment::Similarity,
            Mode::Rgbd => Alignment::Rigid,
        }
    }

    fn prefix_ate(&self) -> Option<f64> {
        let gt = self.seq.ground_truth.as_ref()?;
        let est = self.poses();
        ate_rmse(&est, &gt[..est.len()], self.alignment()).ok()
    }

    fn point_index(&self, id: usize) -> Option<usize> {
        self.points.binary_search_by_key(&id, |p| p.id).ok()
    }

    fn local_point(&self, landmark: usize, frame: usize) -> Option<usize> {
        self.local
            .get(&landmark)
            .filter(|t| frame - t.since <= self.config.tracking.track_window)
            .map(|t| t.point)
    }

    fn predict(&self, k: usize) -> RigidPose {
        let last = self.pose(k - 1);
        if k >= 2 {
            let motion = last.compose(&self.pose(k - 2).inverse());
            motion.compose(&last)
        } else {
            last
        }
    }

    fn new_point(&mut self, position: Vector3<f64>, descriptor: u64, observations: Vec<Observation>) -> usize {
        let id = self.next_point;
        self.next_point += 1;
        self.points.push(MapPoint {
            id,
            descriptor,
            position,
            observations,
        });
        id
    }

    fn observation(&self, kf: usize, f: &Feature) -> Observation {
        Observation {
            keyframe_id: kf,
            pixel: f.pixel,
            sigma2: self.sigma2,
            depth: f.depth,
        }
    }

    /// Tracks synthetic frame `k` from front-end features.
    fn track_synthetic(&mut self, k: usize, frontend: &mut SyntheticFrontend) -> Result<(), FrameError> {
        let start = Instant::now();
        let gt = self.seq.ground_truth.as_ref().expect("synthetic scenes have poses")[k];
        let mode = self.mode();
        let features = frontend.observe(&gt, mode == Mode::Rgbd);
        let bootstrap_keyframes = if mode == Mode::Mono { 2 } else { 1 };
        let bootstrap = self.keyframes.len() < bootstrap_keyframes;
        let camera = self.seq.camera;

        let mut matched: Vec<Option<usize>> = features.iter().map(|f| self.local_point(f.landmark, k)).collect();
        let pose = if bootstrap {
            gt
        } else {
            let obs: Vec<PoseObservation> = features
                .iter()
                .zip(&matched)
                .filter_map(|(f, m)| {
                    let idx = self.point_index((*m)?)?;
                    Some(PoseObservation {
                        point: self.points[idx].position,
                        pixel: f.pixel,
                        sigma2: self.sigma2,
                    })
                })
                .collect();
            if obs.len() < MIN_POSE_OBSERVATIONS {
                return Err(FrameError::Lost {
                    tracked: obs.len(),
                    needed: MIN_POSE_OBSERVATIONS,
                });
            }
            let est = estimate_pose(&obs, &camera, &self.predict(k))?;
            self.drift.transform_camera(&est.pose)
        };
        // Drop matches that disagree with the estimated pose.
        for (f, m) in features.iter().zip(matched.iter_mut()) {
            let Some(idx) = m.and_then(|id| self.point_index(id)) else {
                *m = None;
                continue;
            };
            let pc = pose.transform_point(&self.points[idx].position);
            let ok = pc.z > MIN_DEPTH
                && camera
                    .project_camera_point(&pc)
                    .map(|u| (u - f.pixel).norm_squared() / self.sigma2 <= HUBER_K * HUBER_K)
                    .unwrap_or(false);
            if !ok {
                *m = None;
            }
        }
        let tracked = matched.iter().flatten().count();

        let is_keyframe = bootstrap || {
            let last = self.keyframes.last().expect("bootstrapped");
            let seen: HashSet<usize> = last.observed_points.iter().copied().collect();
            let still = matched.iter().flatten().filter(|id| seen.contains(id)).count();
            let overlap = still as f64 / seen.len().max(1) as f64;
            let moved = (pose.camera_center() - last.pose.camera_center()).norm();
            overlap < self.config.tracking.keyframe_overlap
                || moved > self.config.tracking.keyframe_translation * self.seq.extent
        };
        let tracking_s;
        let mapping_start;
        if is_keyframe {
            let kf_index = self.keyframes.len();
            let mut kf = Keyframe {
                id: kf_index,
                timestamp: self.seq.timestamps[k],
                pose,
                camera,
                image: self.seq.color(k)?,
                depth: self.seq.depth(k, mode)?,
                observed_points: Vec::new(),
            };
            let mut new_points = Vec::new();
            for (f, m) in features.iter().zip(&matched) {
                if let Some(id) = m {
                    let idx = self.point_index(*id).expect("matched point exists");
                    let obs = self.observation(kf_index, f);
                    self.points[idx].observations.push(obs);
                    kf.observed_points.push(*id);
                    continue;
                }
                if self.local_point(f.landmark, k).is_some() {
                    // Tracked but rejected as an outlier.
                    continue;
                }
                match mode {
                    Mode::Rgbd => {
                        let Some(z) = f.depth else { continue };
                        let p = pose.inverse().transform_point(&camera.backproject(f.pixel.x, f.pixel.y, z));
                        let obs = self.observation(kf_index, f);
                        let id = self.new_point(p, f.landmark as u64, vec![obs]);
                        kf.observed_points.push(id);
                        self.local.insert(f.landmark, Track { point: id, since: k });
                        new_points.push(id);
                    }
                    Mode::Mono => {
                        if let Some(id) = self.triangulate_pending(kf_index, &pose, f)? {
                            kf.observed_points.push(id);
                            self.local.insert(f.landmark, Track { point: id, since: k });
                            new_points.push(id);
                        }
                    }
                }
            }
            self.keyframes.push(kf);
            self.frames.push(FrameRecord {
                reference: kf_index,
                relative: RigidPose::identity(),
                keyframe: true,
                tracked,
            });
            tracking_s = start.elapsed().as_secs_f64();
            mapping_start = Instant::now();
            let seeds: Vec<MapPoint> = new_points
                .iter()
                .filter_map(|id| self.point_index(*id).map(|i| self.points[i].clone()))
                .collect();
            let gaussians = seed_gaussians(&seeds, &self.keyframes, self.seq.extent);
            self.mapper.add_gaussians(&gaussians);
            self.maybe_close_loop(k)?;
            self.mapper
                .optimize_window(&self.keyframes, kf_index, self.config.optimizer.iterations_per_keyframe)?;
        } else {
            let reference = self.keyframes.len() - 1;
            self.frames.push(FrameRecord {
                reference,
                relative: pose.compose(&self.keyframes[reference].pose.inverse()),
                keyframe: false,
                tracked,
            });
            tracking_s = start.elapsed().as_secs_f64();
            mapping_start = Instant::now();
        }
        self.timing.push(FrameTiming {
            index: k,
            tracking_s,
            mapping_s: mapping_start.elapsed().as_secs_f64(),
        });
        Ok(())
    }

    /// Monocular point creation: triangulates against the landmark's first
    /// sighting once the parallax suffices, else records the sighting.
    fn triangulate_pending(&mut self, kf_index: usize, pose: &RigidPose, f: &Feature) -> Result<Option<usize>, FrameError> {
        let camera = self.seq.camera;
        let Some(&(a, pixel_a)) = self.pending.get(&f.landmark) else {
            self.pending.insert(f.landmark, (kf_index, f.pixel));
            return Ok(None);
        };
        let pose_a = self.keyframes[a].pose;
        let ray_a = (pose_a.rotation.inverse() * camera.unproject(pixel_a.x, pixel_a.y)).normalize();
        let ray_b = (pose.rotation.inverse() * camera.unproject(f.pixel.x, f.pixel.y)).normalize();
        let parallax = ray_a.dot(&ray_b).clamp(-1.0, 1.0).acos().to_degrees();
        if parallax < self.config.tracking.min_parallax_deg {
            return Ok(None);
        }
        let p = match triangulate(&pixel_a, &f.pixel, &pose_a, pose, &camera, &camera) {
            Ok(p) => p,
            Err(TrackingError::DegenerateParallax) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let consistent = [(pose_a, pixel_a), (*pose, f.pixel)].iter().all(|(q, u)| {
            let pc = q.transform_point(&p);
            pc.z > MIN_DEPTH
                && camera
                    .project_camera_point(&pc)
                    .map(|v| (v - u).norm_squared() / self.sigma2 <= HUBER_K * HUBER_K)
                    .unwrap_or(false)
        });
        self.pending.remove(&f.landmark);
        if !consistent {
            return Ok(None);
        }
        let first = Observation {
            keyframe_id: a,
            pixel: pixel_a,
            sigma2: self.sigma2,
            depth: None,
        };
        let id = self.new_point(p, f.landmark as u64, vec![first, self.observation(kf_index, f)]);
        self.keyframes[a].observed_points.push(id);
        Ok(Some(id))
    }

    fn maybe_close_loop(&mut self, frame: usize) -> Result<(), FrameError> {
        let current = self.keyframes.len() - 1;
        let loops = &self.config.tracking.loops;
        if self.last_loop.is_some_and(|l| current - l < loops.min_gap) {
            return Ok(());
        }
        let mut cfg = *loops;
        cfg.with_scale = self.mode() == Mode::Mono;
        let Some(constraint) = detect_loop(&self.keyframes, &self.points, current, &cfg) else {
            return Ok(());
        };
        self.close_loop(&constraint, frame)
    }

    fn close_loop(&mut self, c: &LoopConstraint, frame: usize) -> Result<(), FrameError> {
        let before_ate = self.prefix_ate();
        let before: Vec<RigidPose> = self.keyframes.iter().map(|k| k.pose).collect();
        let ba = BaConfig {
            fix_scale: self.mode() == Mode::Mono,
            use_depth: self.mode() == Mode::Rgbd,
            depth_sigma: self.config.tracking.depth_sigma.max(1e-4),
            ..self.config.tracking.ba
        };
        correct_loop(&mut self.keyframes, &mut self.points, c, &ba)?;
        // Fused points continue as their older twins.
        let replace: HashMap<usize, usize> = c.matches.iter().map(|&(a, b)| (b, a)).collect();
        for t in self.local.values_mut() {
            if let Some(&a) = replace.get(&t.point) {
                t.point = a;
                t.since = frame;
            }
        }
        // Each Gaussian follows the keyframe it was nearest to.
        let centers: Vec<Vector3<f64>> = before.iter().map(|p| p.camera_center()).collect();
        let moved: Vec<GaussianPrimitive> = self
            .mapper
            .map()
            .iter()
            .map(|g| {
                let (i, _) = centers
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (i, (c - g.mean).norm_squared()))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("keyframes exist");
                let delta = self.keyframes[i].pose.inverse().compose(&before[i]);
                GaussianPrimitive {
                    mean: delta.transform_point(&g.mean),
                    rotation: delta.rotation * g.rotation,
                    ..*g
                }
            })
            .collect();
        self.mapper.replace_map(moved);
        self.loops.push(LoopRecord {
            frame,
            keyframe_a: c.a,
            keyframe_b: c.b,
            matches: c.matches.len(),
            ate_before_m: before_ate,
            ate_after_m: self.prefix_ate(),
        });
        self.last_loop = Some(c.b);
        log::info!(
            "frame {frame}: loop between keyframes {} and {} ({} matches)",
            c.a,
            c.b,
            c.matches.len()
        );
        Ok(())
    }

    /// Maps dataset frame `k` along the ground-truth trajectory.
    fn map_dataset_frame(&mut self, k: usize) -> Result<(), FrameError> {
        let start = Instant::now();
        let pose = self.seq.ground_truth.as_ref().expect("checked at open")[k];
        let camera = self.seq.camera;
        let is_keyframe = match self.keyframes.last() {
            None => true,
            Some(last) => {
                let ids = &last.observed_points;
                let inside = ids
                    .iter()
                    .filter_map(|id| self.point_index(*id))
                    .filter(|&i| {
                        let pc = pose.transform_point(&self.points[i].position);
                        pc.z > MIN_DEPTH && camera.project_camera_point(&pc).is_ok_and(|u| camera.contains(&u))
                    })
                    .count();
                let overlap = inside as f64 / ids.len().max(1) as f64;
                let moved = (pose.camera_center() - last.pose.camera_center()).norm();
                overlap < self.config.tracking.keyframe_overlap
                    || moved > self.config.tracking.keyframe_translation * self.seq.extent
            }
        };
        if !is_keyframe {
            let reference = self.keyframes.len() - 1;
            self.frames.push(FrameRecord {
                reference,
                relative: pose.compose(&self.keyframes[reference].pose.inverse()),
                keyframe: false,
                tracked: 0,
            });
            self.timing.push(FrameTiming {
                index: k,
                tracking_s: start.elapsed().as_secs_f64(),
                mapping_s: 0.0,
            });
            return Ok(());
        }
        let kf_index = self.keyframes.len();
        let depth = self.seq.depth(k, self.mode())?.expect("rgbd checked at open");
        let stride = ((depth.width * depth.height) as f64 / DATASET_POINTS_PER_KEYFRAME as f64).sqrt().max(1.0) as usize;
        let to_world = pose.inverse();
        let mut new_points = Vec::new();
        for y in (stride / 2..depth.height).step_by(stride) {
            for x in (stride / 2..depth.width).step_by(stride) {
                let z = depth.get(x, y);
                if z <= 0.0 {
                    continue;
                }
                let p = to_world.transform_point(&camera.backproject(x as f64, y as f64, z));
                let obs = Observation {
                    keyframe_id: kf_index,
                    pixel: Vector2::new(x as f64, y as f64),
                    sigma2: self.sigma2,
                    depth: Some(z),
                };
                let id = self.next_point as u64;
                new_points.push(self.new_point(p, id, vec![obs]));
            }
        }
        self.keyframes.push(Keyframe {
            id: kf_index,
            timestamp: self.seq.timestamps[k],
            pose,
            camera,
            image: self.seq.color(k)?,
            depth: Some(depth),
            observed_points: new_points.clone(),
        });
        self.frames.push(FrameRecord {
            reference: kf_index,
            relative: RigidPose::identity(),
            keyframe: true,
            tracked: new_points.len(),
        });
        let tracking_s = start.elapsed().as_secs_f64();
        let mapping_start = Instant::now();
        let first = self.points.len() - new_points.len();
        let gaussians = seed_gaussians(&self.points[first..], &self.keyframes, self.seq.extent);
        self.mapper.add_gaussians(&gaussians);
        self.mapper
            .optimize_window(&self.keyframes, kf_index, self.config.optimizer.iterations_per_keyframe)?;
        self.timing.push(FrameTiming {
            index: k,
            tracking_s,
            mapping_s: mapping_start.elapsed().as_secs_f64(),
        });
        Ok(())
    }
}

struct Evaluated {
    index: usize,
    render: ImageRgb,
    psnr: f64,
    ssim: f64,
    depth_l1: Option<f64>,
}

fn evaluate_frame(seq: &Sequence, mode: Mode, k: usize, pose: &RigidPose, map: &[GaussianPrimitive]) -> Result<Evaluated, RunError> {
    let frame = render(&seq.camera, pose, map);
    let target = seq.color(k)?;
    let tag = |source| RunError::Evaluation { frame: k, source };
    let p = psnr(&frame.color, &target).map_err(tag)?;
    let s = ssim(&frame.color, &target).map_err(tag)?;
    let depth_l1 = match seq.reference_depth(k, mode)? {
        Some(gt) => {
            let mut est = frame.depth.clone();
            for (d, a) in est.data.iter_mut().zip(&frame.alpha) {
                if *a < DEPTH_ALPHA {
                    *d = 0.0;
                }
            }
            depth_l1(&est, &gt).ok()
        }
        None => None,
    };
    Ok(Evaluated {
        index: k,
        render: frame.color,
        psnr: p,
        ssim: s,
        depth_l1,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Runs both stages and the evaluation without writing anything.
pub fn run(source: &DataSource, config: &RunConfig) -> Result<RunResult, RunError> {
    config.validate()?;
    let t_total = Instant::now();
    let seq = Sequence::open(source, config)?;
    let mut slam = Slam::new(config, &seq)?;

    let t1 = Instant::now();
    match &seq.frames {
        Frames::Synthetic(scene) => {
            let t = &config.tracking;
            let depth_noise = if config.mode == Mode::Rgbd { t.depth_sigma } else { 0.0 };
            let mut frontend = SyntheticFrontend::new(
                scene.landmarks.clone(),
                scene.landmark_normals.clone(),
                seq.camera,
                t.pixel_noise,
                depth_noise,
                t.outlier_ratio,
                config.seed,
            );
            for k in 0..seq.len() {
                slam.track_synthetic(k, &mut frontend)
                    .map_err(|source| RunError::Frame { frame: k, source })?;
            }
        }
        Frames::Dataset { .. } => {
            for k in 0..seq.len() {
                slam.map_dataset_frame(k).map_err(|source| RunError::Frame { frame: k, source })?;
            }
        }
    }
    if config.final_iterations > 0 {
        let last = seq.len() - 1;
        // Round-robin so no keyframe dominates the final passes.
        for k in 0..config.final_iterations {
            slam.mapper
                .step(&slam.keyframes[k % slam.keyframes.len()])
                .map_err(|e| RunError::Frame {
                    frame: last,
                    source: e.into(),
                })?;
        }
    }
    let stage1_s = t1.elapsed().as_secs_f64();
    log::info!(
        "stage 1: {} frames, {} keyframes, {} gaussians in {stage1_s:.1} s",
        seq.len(),
        slam.keyframes.len(),
        slam.mapper.map().len()
    );

    let t2 = Instant::now();
    let map = slam.mapper.map().to_vec();
    let views: Vec<_> = slam.keyframes.iter().map(|k| k.view()).collect();
    let mesh = extract_mesh(&map, &views, &config.extraction)?.mesh;
    let stage2_s = t2.elapsed().as_secs_f64();

    let t3 = Instant::now();
    let poses = slam.poses();
    let eval_frames: Vec<usize> = (0..seq.len()).step_by(config.eval_stride).collect();
    let evaluated: Vec<Evaluated> = eval_frames
        .par_iter()
        .map(|&k| evaluate_frame(&seq, config.mode, k, &poses[k], &map))
        .collect::<Result<_, _>>()?;
    let evaluation_s = t3.elapsed().as_secs_f64();

    let ate_rmse_m = seq
        .ground_truth
        .as_ref()
        .and_then(|gt| ate_rmse(&poses, gt, slam.alignment()).ok());
    let by_index: HashMap<usize, &Evaluated> = evaluated.iter().map(|e| (e.index, e)).collect();
    let rows: Vec<FrameRow> = slam
        .frames
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let e = by_index.get(&k);
            FrameRow {
                index: k,
                timestamp: seq.timestamps[k],
                keyframe: f.keyframe,
                tracked_points: f.tracked,
                psnr_db: e.map(|e| e.psnr),
                ssim: e.map(|e| e.ssim),
                depth_l1_m: e.and_then(|e| e.depth_l1),
            }
        })
        .collect();
    let metrics = MetricsReport {
        mode: config.mode,
        ate_rmse_m,
        ate_before_loop_m: slam.loops.first().and_then(|l| l.ate_before_m),
        psnr_db: mean(evaluated.iter().map(|e| e.psnr)),
        ssim: mean(evaluated.iter().map(|e| e.ssim)),
        depth_l1_m: mean(evaluated.iter().filter_map(|e| e.depth_l1)),
        n_gaussians: map.len(),
        n_keyframes: slam.keyframes.len(),
        n_frames: seq.len(),
        n_map_points: slam.points.len(),
        mesh_vertices: mesh.vertices.len(),
        mesh_triangles: mesh.triangles.len(),
        scene_extent_m: seq.extent,
        loop_closures: slam.loops.clone(),
        frames: rows,
    };
    let n = seq.len() as f64;
    let tracking_total: f64 = slam.timing.iter().map(|t| t.tracking_s).sum();
    let mapping_total: f64 = slam.timing.iter().map(|t| t.mapping_s).sum();
    let timing = TimingReport {
        total_s: t_total.elapsed().as_secs_f64(),
        stage1_s,
        stage2_s,
        evaluation_s,
        tracking_per_frame_s: tracking_total / n,
        mapping_per_frame_s: mapping_total / n,
        fps: if stage1_s > 0.0 { n / stage1_s } else { 0.0 },
        frames: slam.timing.clone(),
    };
    let trajectory = poses
        .iter()
        .zip(&seq.timestamps)
        .map(|(p, t)| StampedPose::from_pose(*t, p))
        .collect();
    let checkpoint = Checkpoint {
        iteration: slam.mapper.iteration(),
        config: slam.mapper.config().clone(),
        map,
        views,
    };
    Ok(RunResult {
        config: config.clone(),
        metrics,
        timing,
        trajectory,
        checkpoint,
        mesh,
        renders: evaluated.into_iter().map(|e| (e.index, e.render)).collect(),
    })
}

/// File names inside the output directory.
pub mod files {
    pub const TRAJECTORY: &str = "trajectory.txt";
    pub const CHECKPOINT: &str = "checkpoint.bin";
    pub const MESH: &str = "mesh.ply";
    pub const METRICS: &str = "metrics.json";
    pub const TIMING: &str = "timing.json";
    pub const CONFIG: &str = "config.toml";
    pub const FRAMES: &str = "frames";
}

/// Writes every artifact of `result` into `out`.
pub fn write_artifacts(result: &RunResult, out: &Path) -> Result<(), RunError> {
    fs::create_dir_all(out.join(files::FRAMES)).map_err(|e| output_error(out, e))?;
    let path = out.join(files::TRAJECTORY);
    save_tum(&path, &result.trajectory).map_err(|e| output_error(&path, e))?;
    let path = out.join(files::CHECKPOINT);
    save_checkpoint(&path, &result.checkpoint).map_err(|e| output_error(&path, e))?;
    let path = out.join(files::MESH);
    save_ply(&path, &result.mesh, PlyFormat::BinaryLittleEndian).map_err(|e| output_error(&path, e))?;
    let path = out.join(files::METRICS);
    let json = serde_json::to_string_pretty(&result.metrics).expect("metrics serialize");
    fs::write(&path, json + "\n").map_err(|e| output_error(&path, e))?;
    let path = out.join(files::TIMING);
    let json = serde_json::to_string_pretty(&result.timing).expect("timing serializes");
    fs::write(&path, json + "\n").map_err(|e| output_error(&path, e))?;
    let path = out.join(files::CONFIG);
    fs::write(&path, result.config.to_toml_string()).map_err(|e| output_error(&path, e))?;
    for (k, img) in &result.renders {
        let path = out.join(files::FRAMES).join(format!("frame_{k:06}.png"));
        save_color(&path, img).map_err(|e| output_error(&path, e))?;
    }
    Ok(())
}

/// Runs the pipeline and writes trajectory, checkpoint, renders, mesh and
/// reports into `out`.
pub fn run_pipeline(source: &DataSource, config: &RunConfig, out: &Path) -> Result<RunResult, RunError> {
    let result = run(source, config)?;
    write_artifacts(&result, out)?;
    Ok(result)
}
