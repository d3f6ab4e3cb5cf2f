//! Pose estimation, triangulation, loop correction and bundle adjustment.

mod ba;
mod loops;
mod pose;
mod robust;
pub mod trajectory;
mod types;

use thiserror::Error;

pub use ba::{global_ba, rms_reprojection_error, BaConfig, BaReport};
pub use loops::{apply_loop_correction, correct_loop, detect_loop, fuse_loop_points, LoopConfig};
pub use pose::{estimate_pose, triangulate, PoseEstimate, PoseObservation, MIN_POSE_OBSERVATIONS};
pub use robust::{huber, huber_weight, reprojection_cost, HUBER_K};
pub use types::{Keyframe, LoopConstraint, MapPoint, Observation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackingError {
    #[error("point {point} references unknown keyframe {keyframe}")]
    DanglingReference { point: usize, keyframe: usize },
    #[error("need at least {needed} observations, got {got}")]
    InsufficientObservations { needed: usize, got: usize },
    #[error("need at least 2 keyframes, got {0}")]
    InsufficientKeyframes(usize),
    #[error("rays are parallel or the baseline is zero")]
    DegenerateParallax,
}
