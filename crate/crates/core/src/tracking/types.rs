use nalgebra::Vector2;
use nalgebra::Vector3;

use crate::geometry::{PinholeCamera, RigidPose, SimilarityTransform};
use crate::image::{DepthMap, ImageRgb};
use crate::opacity::View;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub keyframe_id: usize,
    pub pixel: Vector2<f64>,
    /// Measurement variance, pixels².
    pub sigma2: f64,
    /// Measured z-depth in metres (RGB-D only).
    pub depth: Option<f64>,
}

impl Observation {
    pub fn new(keyframe_id: usize, pixel: Vector2<f64>, sigma2: f64) -> Self {
        Self {
            keyframe_id,
            pixel,
            sigma2,
            depth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapPoint {
    pub id: usize,
    /// Appearance identity reported by the feature front-end; two map points
    /// with the same descriptor are the same physical feature.
    pub descriptor: u64,
    pub position: Vector3<f64>,
    pub observations: Vec<Observation>,
}

impl MapPoint {
    pub fn new(id: usize, position: Vector3<f64>) -> Self {
        Self {
            id,
            descriptor: id as u64,
            position,
            observations: Vec::new(),
        }
    }

    /// Id of the most recent keyframe that sees this point.
    pub fn last_observer(&self) -> Option<usize> {
        self.observations.iter().map(|o| o.keyframe_id).max()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: usize,
    pub timestamp: f64,
    /// World-to-camera.
    pub pose: RigidPose,
    pub camera: PinholeCamera,
    pub image: ImageRgb,
    pub depth: Option<DepthMap>,
    pub observed_points: Vec<usize>,
}

impl Keyframe {
    pub fn view(&self) -> View {
        View {
            pose: self.pose,
            camera: self.camera,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConstraint {
    /// Older keyframe.
    pub a: usize,
    /// Current keyframe.
    pub b: usize,
    /// Maps the drifted positions seen from `b` onto the frame of `a`.
    pub correction: SimilarityTransform,
    /// `(point id seen by a, point id seen by b)` of the same physical point.
    pub matches: Vec<(usize, usize)>,
}
