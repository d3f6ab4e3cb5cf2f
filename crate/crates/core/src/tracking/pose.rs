use nalgebra::{Matrix2x3, Matrix3, Matrix6, SMatrix, Vector2, Vector3, Vector6};

use super::robust::{huber, huber_weight, BEHIND_CAMERA_S};
use super::TrackingError;
use crate::geometry::{PinholeCamera, RigidPose, MIN_DEPTH};

pub const MIN_POSE_OBSERVATIONS: usize = 6;
pub const POSE_MAX_ITERATIONS: usize = 100;
pub const POSE_STEP_TOL: f64 = 1e-8;

/// A 2D measurement of a known 3D point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseObservation {
    pub point: Vector3<f64>,
    pub pixel: Vector2<f64>,
    pub sigma2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    pub pose: RigidPose,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit; `pose` is then the best so far.
    pub converged: bool,
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Jacobian of the pinhole projection at a camera-frame point.
pub(crate) fn projection_jacobian(camera: &PinholeCamera, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * pc.x * iz2,
        0.0,
        camera.fy * iz,
        -camera.fy * pc.y * iz2,
    )
}

/// Derivative of a camera-frame point with respect to the left pose
/// increment `(ω, v)`.
pub(crate) fn point_pose_jacobian(pc: &Vector3<f64>) -> SMatrix<f64, 3, 6> {
    let mut j = SMatrix::<f64, 3, 6>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(pc)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    j
}

fn pose_cost(obs: &[PoseObservation], camera: &PinholeCamera, pose: &RigidPose) -> f64 {
    obs.iter()
        .map(|o| {
            let pc = pose.transform_point(&o.point);
            let s = if pc.z <= MIN_DEPTH {
                BEHIND_CAMERA_S
            } else {
                let u = Vector2::new(camera.fx * pc.x / pc.z + camera.cx, camera.fy * pc.y / pc.z + camera.cy);
                (u - o.pixel).norm_squared() / o.sigma2
            };
            0.5 * huber(s)
        })
        .sum()
}

/// Pose-only Levenberg–Marquardt on the robust reprojection cost.
pub fn estimate_pose(
    obs: &[PoseObservation],
    camera: &PinholeCamera,
    initial: &RigidPose,
) -> Result<PoseEstimate, TrackingError> {
    if obs.len() < MIN_POSE_OBSERVATIONS {
        return Err(TrackingError::InsufficientObservations {
            needed: MIN_POSE_OBSERVATIONS,
            got: obs.len(),
        });
    }
    let mut pose = *initial;
    let initial_cost = pose_cost(obs, camera, &pose);
    let mut cost = initial_cost;
    let mut lambda = 1e-4;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < POSE_MAX_ITERATIONS {
        let mut h = Matrix6::zeros();
        let mut b = Vector6::zeros();
        for o in obs {
            let pc = pose.transform_point(&o.point);
            if pc.z <= MIN_DEPTH {
                continue;
            }
            let u = Vector2::new(camera.fx * pc.x / pc.z + camera.cx, camera.fy * pc.y / pc.z + camera.cy);
            let r = u - o.pixel;
            let s = r.norm_squared() / o.sigma2;
            let w = huber_weight(s) / o.sigma2;
            let j = projection_jacobian(camera, &pc) * point_pose_jacobian(&pc);
            h += j.transpose() * j * w;
            b += j.transpose() * r * w;
        }
        let mut damped = h;
        for k in 0..6 {
            damped[(k, k)] += lambda * h[(k, k)].max(1e-12);
        }
        let Some(step) = damped.cholesky().map(|c| c.solve(&(-b))) else {
            lambda *= 10.0;
            iterations += 1;
            continue;
        };
        if step.norm() < POSE_STEP_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let candidate = pose.retract(&step.fixed_rows::<3>(0).into(), &step.fixed_rows::<3>(3).into());
        let new_cost = pose_cost(obs, camera, &candidate);
        if new_cost < cost {
            pose = candidate;
            cost = new_cost;
            lambda = (lambda / 10.0).max(1e-12);
        } else {
            lambda *= 10.0;
            if lambda > 1e16 {
                // No descent direction left at machine precision.
                converged = true;
                break;
            }
        }
    }
    Ok(PoseEstimate {
        pose,
        initial_cost,
        final_cost: cost,
        iterations,
        converged,
    })
}

/// Midpoint of closest approach of the two back-projected rays.
pub fn triangulate(
    p_a: &Vector2<f64>,
    p_b: &Vector2<f64>,
    pose_a: &RigidPose,
    pose_b: &RigidPose,
    camera_a: &PinholeCamera,
    camera_b: &PinholeCamera,
) -> Result<Vector3<f64>, TrackingError> {
    let c_a = pose_a.camera_center();
    let c_b = pose_b.camera_center();
    let d_a = (pose_a.rotation.inverse() * camera_a.unproject(p_a.x, p_a.y)).normalize();
    let d_b = (pose_b.rotation.inverse() * camera_b.unproject(p_b.x, p_b.y)).normalize();
    if (c_b - c_a).norm() < 1e-12 || d_a.cross(&d_b).norm() < 1e-6 {
        return Err(TrackingError::DegenerateParallax);
    }
    // Solve for s, t minimizing |c_a + s d_a − c_b − t d_b|.
    let w = c_a - c_b;
    let b = d_a.dot(&d_b);
    let d = d_a.dot(&w);
    let e = d_b.dot(&w);
    let denom = 1.0 - b * b;
    let s = (b * e - d) / denom;
    let t = (e - b * d) / denom;
    Ok((c_a + d_a * s + c_b + d_b * t) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal(rng: &mut impl Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    fn camera() -> PinholeCamera {
        PinholeCamera::new(300.0, 300.0, 160.0, 120.0, 320, 240).unwrap()
    }

    fn scene(rng: &mut ChaCha8Rng, n: usize, pose: &RigidPose) -> Vec<PoseObservation> {
        let cam = camera();
        (0..n)
            .map(|_| {
                let pc = Vector3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.6..0.6), rng.gen_range(1.5..3.0));
                let point = pose.inverse().transform_point(&pc);
                PoseObservation {
                    point,
                    pixel: project(&cam, pose, &point).unwrap(),
                    sigma2: 1.0,
                }
            })
            .collect()
    }

    fn truth() -> RigidPose {
        RigidPose::new(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.1, -0.2, 0.05)),
            Vector3::new(0.2, -0.1, 0.3),
        )
    }

    fn perturb(pose: &RigidPose, deg: f64, m: f64) -> RigidPose {
        pose.retract(&Vector3::new(1.0, -1.0, 0.5).normalize().scale(deg.to_radians()), &Vector3::new(m, -m, m * 0.5))
    }

    #[test]
    fn recovers_pose_from_noise_free_observations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = truth();
        let obs = scene(&mut rng, 50, &gt);
        let est = estimate_pose(&obs, &camera(), &perturb(&gt, 5.0, 0.1)).unwrap();
        assert!(est.converged);
        assert!(est.final_cost <= est.initial_cost);
        assert!((est.pose.camera_center() - gt.camera_center()).norm() < 1e-6);
        assert!(est.pose.rotation.angle_to(&gt.rotation) < 1e-6);
    }

    #[test]
    fn ground_truth_start_takes_no_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = truth();
        let obs = scene(&mut rng, 20, &gt);
        let est = estimate_pose(&obs, &camera(), &gt).unwrap();
        assert_eq!(est.iterations, 0);
        assert_eq!(est.pose, gt);
    }

    #[test]
    fn robust_to_thirty_percent_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = truth();
        let mut obs = scene(&mut rng, 100, &gt);
        for o in obs.iter_mut() {
            o.pixel += Vector2::new(normal(&mut rng), normal(&mut rng)) * 0.5;
        }
        for o in obs.iter_mut().take(30) {
            o.pixel = Vector2::new(rng.gen_range(0.0..320.0), rng.gen_range(0.0..240.0));
        }
        let est = estimate_pose(&obs, &camera(), &perturb(&gt, 5.0, 0.1)).unwrap();
        assert!(est.pose.rotation.angle_to(&gt.rotation).to_degrees() < 0.5);
    }

    #[test]
    fn too_few_observations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = scene(&mut rng, 5, &truth());
        assert!(matches!(
            estimate_pose(&obs, &camera(), &truth()),
            Err(TrackingError::InsufficientObservations { needed: 6, got: 5 })
        ));
    }

    fn stereo() -> (RigidPose, RigidPose) {
        // Two cameras 60° apart looking at the origin.
        let a = RigidPose::look_at(Vector3::new(0.0, 0.0, -2.0), Vector3::zeros(), Vector3::y());
        let eye = Vector3::new(2.0 * 60f64.to_radians().sin(), 0.0, -2.0 * 60f64.to_radians().cos());
        let b = RigidPose::look_at(eye, Vector3::zeros(), Vector3::y());
        (a, b)
    }

    #[test]
    fn triangulates_exact_projections() {
        let (a, b) = stereo();
        let cam = camera();
        let p = Vector3::new(0.1, -0.2, 0.15);
        let x = triangulate(&project(&cam, &a, &p).unwrap(), &project(&cam, &b, &p).unwrap(), &a, &b, &cam, &cam).unwrap();
        assert!((x - p).norm() < 1e-9);
        let same = triangulate(&Vector2::new(10.0, 10.0), &Vector2::new(20.0, 10.0), &a, &a, &cam, &cam);
        assert!(matches!(same, Err(TrackingError::DegenerateParallax)));
    }

    #[test]
    fn triangulation_noise_matches_first_order_estimate() {
        let (a, b) = stereo();
        let cam = camera();
        let p = Vector3::new(0.05, 0.02, 0.0);
        let ua = project(&cam, &a, &p).unwrap();
        let ub = project(&cam, &b, &p).unwrap();
        // Numerical Jacobian of the estimate with respect to the four pixel coordinates.
        let h = 1e-4;
        let mut jjt = 0.0;
        for k in 0..4 {
            let mut da = Vector2::zeros();
            let mut db = Vector2::zeros();
            if k < 2 {
                da[k] = h;
            } else {
                db[k - 2] = h;
            }
            let xp = triangulate(&(ua + da), &(ub + db), &a, &b, &cam, &cam).unwrap();
            let xm = triangulate(&(ua - da), &(ub - db), &a, &b, &cam, &cam).unwrap();
            jjt += ((xp - xm) / (2.0 * h)).norm_squared();
        }
        let predicted_rms = jjt.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4000;
        let mut sq = 0.0;
        for _ in 0..n {
            let na = Vector2::new(normal(&mut rng), normal(&mut rng));
            let nb = Vector2::new(normal(&mut rng), normal(&mut rng));
            let x = triangulate(&(ua + na), &(ub + nb), &a, &b, &cam, &cam).unwrap();
            sq += (x - p).norm_squared();
        }
        let rms = (sq / n as f64).sqrt();
        assert!((rms / predicted_rms - 1.0).abs() < 0.1, "rms {rms} predicted {predicted_rms}");
    }
}
