//! Synthetic feature front-end: projects known surface landmarks into each
//! frame, standing in for feature detection and matching.

use fgo_core::geometry::{PinholeCamera, RigidPose, MIN_DEPTH};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feature {
    /// Landmark index, doubling as the feature descriptor.
    pub landmark: usize,
    pub pixel: Vector2<f64>,
    /// Measured z-depth (RGB-D only).
    pub depth: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticFrontend {
    landmarks: Vec<Vector3<f64>>,
    normals: Vec<Vector3<f64>>,
    camera: PinholeCamera,
    pixel_noise: f64,
    depth_noise: f64,
    outlier_ratio: f64,
    rng: ChaCha8Rng,
}

impl SyntheticFrontend {
    pub fn new(
        landmarks: Vec<Vector3<f64>>,
        normals: Vec<Vector3<f64>>,
        camera: PinholeCamera,
        pixel_noise: f64,
        depth_noise: f64,
        outlier_ratio: f64,
        seed: u64,
    ) -> Self {
        assert_eq!(landmarks.len(), normals.len(), "one normal per landmark");
        Self {
            landmarks,
            normals,
            camera,
            pixel_noise,
            depth_noise,
            outlier_ratio,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn landmark(&self, i: usize) -> Vector3<f64> {
        self.landmarks[i]
    }

    /// Whether landmark `i` faces the camera and projects inside the image.
    pub fn visible(&self, i: usize, pose: &RigidPose) -> Option<Vector2<f64>> {
        let p = self.landmarks[i];
        if self.normals[i].dot(&(pose.camera_center() - p)) <= 0.0 {
            return None;
        }
        let pc = pose.transform_point(&p);
        if pc.z <= MIN_DEPTH {
            return None;
        }
        let u = self.camera.project_camera_point(&pc).ok()?;
        self.camera.contains(&u).then_some(u)
    }

    /// Noisy features of every visible landmark seen from the true `pose`,
    /// in landmark order.
    pub fn observe(&mut self, pose: &RigidPose, with_depth: bool) -> Vec<Feature> {
        let mut out = Vec::new();
        for i in 0..self.landmarks.len() {
            let Some(u) = self.visible(i, pose) else { continue };
            let z = pose.transform_point(&self.landmarks[i]).z;
            let noise = Vector2::new(self.gauss(), self.gauss()) * self.pixel_noise;
            let dz = self.gauss() * self.depth_noise;
            let outlier = self.rng.gen::<f64>() < self.outlier_ratio;
            let pixel = if outlier {
                Vector2::new(
                    self.rng.gen_range(0.0..(self.camera.width - 1) as f64),
                    self.rng.gen_range(0.0..(self.camera.height - 1) as f64),
                )
            } else {
                let w = (self.camera.width - 1) as f64;
                let h = (self.camera.height - 1) as f64;
                let p = u + noise;
                Vector2::new(p.x.clamp(0.0, w), p.y.clamp(0.0, h))
            };
            out.push(Feature {
                landmark: i,
                pixel,
                depth: with_depth.then_some((z + dz).max(MIN_DEPTH * 2.0)),
            });
        }
        out
    }

    fn gauss(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}
