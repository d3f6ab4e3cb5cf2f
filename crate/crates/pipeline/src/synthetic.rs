//! Deterministic desk-scale scenes: a sphere-shaped object covered by flat
//! Gaussians, seen along an orbit, a line, or a closed square loop.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use fgo_core::geometry::{GaussianPrimitive, PinholeCamera, RigidPose};
use fgo_core::image::{DepthMap, ImageRgb};
use fgo_core::render::render;
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Radius of the object surface, metres.
pub const OBJECT_RADIUS: f64 = 0.25;
/// Rendered pixels below this accumulated alpha carry no depth.
pub const DEPTH_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryShape {
    Orbit,
    Line,
    SquareLoop,
}

impl FromStr for TrajectoryShape {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "orbit" => Ok(Self::Orbit),
            "line" => Ok(Self::Line),
            "square-loop" => Ok(Self::SquareLoop),
            _ => Err(format!("unknown trajectory shape '{s}' (orbit, line, square-loop)")),
        }
    }
}

impl fmt::Display for TrajectoryShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Orbit => "orbit",
            Self::Line => "line",
            Self::SquareLoop => "square-loop",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub shape: TrajectoryShape,
    pub n_gaussians: usize,
    pub n_frames: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Surface points the feature front-end can observe.
    pub n_landmarks: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            shape: TrajectoryShape::Orbit,
            n_gaussians: 60,
            n_frames: 40,
            seed: 0,
            width: 64,
            height: 48,
            n_landmarks: 400,
        }
    }
}

impl FromStr for SyntheticSpec {
    type Err = String;

    /// `shape[:key=value,...]` with keys gaussians, frames, seed, width,
    /// height, landmarks; e.g. `square-loop:frames=80,gaussians=40`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (shape, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut spec = SyntheticSpec {
            shape: shape.parse()?,
            ..Default::default()
        };
        for kv in rest.split(',').filter(|kv| !kv.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected key=value, got '{kv}'"))?;
            let n: u64 = v.parse().map_err(|_| format!("bad value for {k}: '{v}'"))?;
            match k {
                "gaussians" => spec.n_gaussians = n as usize,
                "frames" => spec.n_frames = n as usize,
                "seed" => spec.seed = n,
                "width" => spec.width = n as usize,
                "height" => spec.height = n as usize,
                "landmarks" => spec.n_landmarks = n as usize,
                _ => return Err(format!("unknown synthetic key '{k}'")),
            }
        }
        if spec.n_gaussians < 1 || spec.n_frames < 2 || spec.width < 2 || spec.height < 2 {
            return Err("need gaussians ≥ 1, frames ≥ 2 and an image of at least 2×2".into());
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SyntheticSpec,
    pub gaussians: Vec<GaussianPrimitive>,
    pub camera: PinholeCamera,
    pub poses: Vec<RigidPose>,
    pub timestamps: Vec<f64>,
    pub colors: Vec<ImageRgb>,
    /// Z-depth where the ground-truth alpha reaches [`DEPTH_ALPHA`], else 0.
    pub depths: Vec<DepthMap>,
    pub landmarks: Vec<Vector3<f64>>,
    pub landmark_normals: Vec<Vector3<f64>>,
    pub extent: f64,
}

/// Points spread evenly over the unit sphere.
fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), y, r * phi.sin())
        })
        .collect()
}

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Flat Gaussians tangent to the object sphere with a smooth random colour
/// pattern.
pub fn object_gaussians(n: usize, rng: &mut impl Rng) -> Vec<GaussianPrimitive> {
    let spacing = OBJECT_RADIUS * (4.0 * PI / n as f64).sqrt();
    let waves: Vec<(Vector3<f64>, f64)> = (0..3)
        .map(|_| (random_unit(rng) * rng.gen_range(4.0..9.0), rng.gen_range(0.0..TAU)))
        .collect();
    fibonacci_sphere(n)
        .into_iter()
        .map(|dir| {
            let dir = (dir + random_unit(rng) * 0.1 * spacing / OBJECT_RADIUS).normalize();
            let mean = dir * OBJECT_RADIUS;
            let tilt = UnitQuaternion::rotation_between(&Vector3::z(), &dir).unwrap_or_else(UnitQuaternion::identity);
            let spin = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), rng.gen_range(0.0..TAU));
            let a = 0.55 * spacing;
            let scale = Vector3::new(a * rng.gen_range(0.8..1.2), a * rng.gen_range(0.8..1.2), a * 0.15);
            let color = Vector3::from_fn(|c, _| {
                let (k, phase) = &waves[c];
                (0.5 + 0.35 * (k.dot(&mean) + phase).sin() + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)
            });
            GaussianPrimitive {
                mean,
                rotation: tilt * spin,
                scale,
                opacity: rng.gen_range(0.88..0.99),
                color,
            }
        })
        .collect()
}

/// Camera poses looking at the object centre.
pub fn trajectory(shape: TrajectoryShape, n: usize) -> Vec<RigidPose> {
    let up = Vector3::y();
    (0..n)
        .map(|i| {
            let eye = match shape {
                TrajectoryShape::Orbit => {
                    let a = TAU * i as f64 / n as f64;
                    Vector3::new(a.cos(), 0.2 * (2.0 * a).sin(), a.sin())
                }
                TrajectoryShape::Line => {
                    let t = i as f64 / (n - 1) as f64;
                    Vector3::new(-0.5 + t, 0.15, -1.0)
                }
                TrajectoryShape::SquareLoop => {
                    // Perimeter of the square with corners (±0.8, ·, ±0.8).
                    let t = 4.0 * i as f64 / (n - 1) as f64;
                    let side = (t.floor() as usize).min(3);
                    let f = t - side as f64;
                    let corners = [(0.8, 0.8), (-0.8, 0.8), (-0.8, -0.8), (0.8, -0.8), (0.8, 0.8)];
                    let (x0, z0) = corners[side];
                    let (x1, z1) = corners[side + 1];
                    Vector3::new(x0 + (x1 - x0) * f, 0.2, z0 + (z1 - z0) * f)
                }
            };
            RigidPose::look_at(eye, Vector3::zeros(), up)
        })
        .collect()
}

pub fn synthetic_camera(width: usize, height: usize) -> PinholeCamera {
    let f = 1.1 * width as f64;
    PinholeCamera::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
        .expect("positive size")
}

/// Ground-truth colour and masked depth of one view.
pub fn render_ground_truth(camera: &PinholeCamera, pose: &RigidPose, map: &[GaussianPrimitive]) -> (ImageRgb, DepthMap) {
    let frame = render(camera, pose, map);
    let mut depth = frame.depth;
    for (d, a) in depth.data.iter_mut().zip(&frame.alpha) {
        if *a < DEPTH_ALPHA {
            *d = 0.0;
        }
    }
    (frame.color, depth)
}

pub fn generate_synthetic_scene(spec: &SyntheticSpec) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gaussians = object_gaussians(spec.n_gaussians, &mut rng);
    let landmarks: Vec<Vector3<f64>> = fibonacci_sphere(spec.n_landmarks)
        .into_iter()
        .map(|d| (d + random_unit(&mut rng) * 0.02).normalize() * OBJECT_RADIUS)
        .collect();
    let landmark_normals = landmarks.iter().map(|p| p.normalize()).collect();
    let camera = synthetic_camera(spec.width, spec.height);
    let poses = trajectory(spec.shape, spec.n_frames);
    let timestamps = (0..spec.n_frames).map(|i| i as f64 / 30.0).collect();
    let (colors, depths) = poses
        .par_iter()
        .map(|p| render_ground_truth(&camera, p, &gaussians))
        .unzip();
    SyntheticScene {
        spec: spec.clone(),
        gaussians,
        camera,
        poses,
        timestamps,
        colors,
        depths,
        landmarks,
        landmark_normals,
        extent: 2.0 * OBJECT_RADIUS,
    }
}
