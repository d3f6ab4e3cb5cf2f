use std::collections::HashMap;

use nalgebra::Vector2;

use super::types::{Keyframe, MapPoint};
use super::TrackingError;
use crate::geometry::{PinholeCamera, RigidPose, MIN_DEPTH};

/// Huber threshold on the normalized residual (95% χ², 2 DoF).
pub const HUBER_K: f64 = 2.447;

/// Squared normalized residual charged for a point behind the camera.
pub const BEHIND_CAMERA_S: f64 = 1e8;

/// Huber ρ on a squared normalized residual `s`.
pub fn huber(s: f64) -> f64 {
    let k2 = HUBER_K * HUBER_K;
    if s <= k2 {
        s
    } else {
        2.0 * HUBER_K * s.sqrt() - k2
    }
}

/// `dρ/ds`, the IRLS weight.
pub fn huber_weight(s: f64) -> f64 {
    if s <= HUBER_K * HUBER_K {
        1.0
    } else {
        HUBER_K / s.sqrt()
    }
}

/// Pixel residual `π(pose·P) − p`, or `None` when the point is behind.
pub(crate) fn residual(
    camera: &PinholeCamera,
    pose: &RigidPose,
    point: &nalgebra::Vector3<f64>,
    pixel: &Vector2<f64>,
) -> Option<Vector2<f64>> {
    let pc = pose.transform_point(point);
    if pc.z <= MIN_DEPTH {
        return None;
    }
    Some(Vector2::new(camera.fx * pc.x / pc.z + camera.cx, camera.fy * pc.y / pc.z + camera.cy) - pixel)
}

pub(crate) fn keyframe_index(keyframes: &[Keyframe]) -> HashMap<usize, usize> {
    keyframes.iter().enumerate().map(|(i, k)| (k.id, i)).collect()
}

/// `Σ ½·ρ(‖p − π(R·P + t)‖² / σ²)` over all observations.
pub fn reprojection_cost(points: &[MapPoint], keyframes: &[Keyframe]) -> Result<f64, TrackingError> {
    let index = keyframe_index(keyframes);
    let mut cost = 0.0;
    for p in points {
        for o in &p.observations {
            let &k = index.get(&o.keyframe_id).ok_or(TrackingError::DanglingReference {
                point: p.id,
                keyframe: o.keyframe_id,
            })?;
            let kf = &keyframes[k];
            let s = match residual(&kf.camera, &kf.pose, &p.position, &o.pixel) {
                Some(r) => r.norm_squared() / o.sigma2,
                None => BEHIND_CAMERA_S,
            };
            cost += 0.5 * huber(s);
        }
    }
    Ok(cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageRgb;
    use crate::tracking::Observation;
    use nalgebra::Vector3;

    fn setup(offset: f64) -> (Vec<MapPoint>, Vec<Keyframe>) {
        let camera = PinholeCamera::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let kf = Keyframe {
            id: 7,
            timestamp: 0.0,
            pose: RigidPose::identity(),
            camera,
            image: ImageRgb::new(1, 1),
            depth: None,
            observed_points: vec![0],
        };
        let mut p = MapPoint::new(0, Vector3::new(0.1, -0.2, 2.0));
        p.observations.push(Observation::new(7, Vector2::new(55.0 + offset, 40.0), 1.0));
        (vec![p], vec![kf])
    }

    #[test]
    fn cost_examples() {
        let (p, k) = setup(0.0);
        assert_eq!(reprojection_cost(&p, &k).unwrap(), 0.0);
        let (p, k) = setup(1.0);
        assert!((reprojection_cost(&p, &k).unwrap() - 0.5).abs() < 1e-12);
        let (p, k) = setup(100.0);
        let c = reprojection_cost(&p, &k).unwrap();
        assert!(c < 0.5 * 100.0 * 100.0 && c > 0.0);
    }

    #[test]
    fn dangling_reference_is_an_error() {
        let (mut p, k) = setup(0.0);
        p[0].observations[0].keyframe_id = 99;
        assert!(matches!(
            reprojection_cost(&p, &k),
            Err(TrackingError::DanglingReference { point: 0, keyframe: 99 })
        ));
    }

    #[test]
    fn huber_is_c1_at_threshold() {
        let k2 = HUBER_K * HUBER_K;
        let h = 1e-7;
        assert!((huber(k2 - h) - huber(k2 + h)).abs() < 1e-6);
        let slope_left = (huber(k2) - huber(k2 - h)) / h;
        let slope_right = (huber(k2 + h) - huber(k2)) / h;
        assert!((slope_left - slope_right).abs() < 1e-6);
        assert!((slope_left - 1.0).abs() < 1e-6);
        assert_eq!(huber_weight(k2), 1.0);
    }
}
