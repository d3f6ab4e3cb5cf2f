//! Global bundle adjustment: Levenberg–Marquardt over all keyframe poses and
//! points with the point blocks eliminated by the Schur complement.

use std::ops::{AddAssign, SubAssign};

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::pose::{point_pose_jacobian, projection_jacobian};
use super::robust::{huber, huber_weight, keyframe_index, BEHIND_CAMERA_S};
use super::types::{Keyframe, MapPoint};
use super::TrackingError;
use crate::geometry::{RigidPose, MIN_DEPTH};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaConfig {
    pub max_iterations: usize,
    /// Stop when an accepted step changes the cost by less than this fraction.
    pub relative_tolerance: f64,
    /// Keep the distance between the first two keyframes fixed (monocular
    /// scale gauge).
    pub fix_scale: bool,
    /// Add depth residuals for observations that carry a depth.
    pub use_depth: bool,
    /// Depth measurement standard deviation, metres.
    pub depth_sigma: f64,
    /// When false only points move.
    pub optimize_poses: bool,
    pub initial_lambda: f64,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            relative_tolerance: 1e-10,
            fix_scale: false,
            use_depth: false,
            depth_sigma: 0.01,
            optimize_poses: true,
            initial_lambda: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit; the best state is kept anyway.
    pub converged: bool,
}

fn total_cost(
    keyframes: &[Keyframe],
    points: &[MapPoint],
    index: &std::collections::HashMap<usize, usize>,
    config: &BaConfig,
) -> f64 {
    let mut cost = 0.0;
    for p in points {
        for o in &p.observations {
            let kf = &keyframes[index[&o.keyframe_id]];
            let pc = kf.pose.transform_point(&p.position);
            if pc.z <= MIN_DEPTH {
                cost += 0.5 * huber(BEHIND_CAMERA_S);
                continue;
            }
            let c = &kf.camera;
            let u = Vector2::new(c.fx * pc.x / pc.z + c.cx, c.fy * pc.y / pc.z + c.cy);
            cost += 0.5 * huber((u - o.pixel).norm_squared() / o.sigma2);
            if config.use_depth {
                if let Some(z) = o.depth {
                    let s = ((pc.z - z) / config.depth_sigma).powi(2);
                    cost += 0.5 * huber(s);
                }
            }
        }
    }
    cost
}

struct PointBlock {
    v: Matrix3<f64>,
    g: Vector3<f64>,
    /// `(camera variable index, ∂²/∂c∂p block)`
    w: Vec<(usize, SMatrix<f64, 6, 3>)>,
}

fn rescale_about(keyframes: &mut [Keyframe], points: &mut [MapPoint], origin: Vector3<f64>, s: f64) {
    for kf in keyframes.iter_mut() {
        let c = origin + (kf.pose.camera_center() - origin) * s;
        kf.pose = RigidPose::new(kf.pose.rotation, -(kf.pose.rotation * c));
    }
    for p in points.iter_mut() {
        p.position = origin + (p.position - origin) * s;
    }
}

/// Jointly refines keyframe poses and point positions. The first keyframe is
/// held fixed; with `fix_scale` the first baseline length is kept as well.
pub fn global_ba(
    keyframes: &mut [Keyframe],
    points: &mut [MapPoint],
    config: &BaConfig,
) -> Result<BaReport, TrackingError> {
    if keyframes.len() < 2 && config.optimize_poses {
        return Err(TrackingError::InsufficientKeyframes(keyframes.len()));
    }
    let index = keyframe_index(keyframes);
    for p in points.iter() {
        for o in &p.observations {
            if !index.contains_key(&o.keyframe_id) {
                return Err(TrackingError::DanglingReference {
                    point: p.id,
                    keyframe: o.keyframe_id,
                });
            }
        }
    }
    let cam_var: Vec<Option<usize>> = (0..keyframes.len())
        .map(|k| if config.optimize_poses && k > 0 { Some(k - 1) } else { None })
        .collect();
    let n_cam = if config.optimize_poses { keyframes.len() - 1 } else { 0 };
    let baseline = if keyframes.len() >= 2 {
        (keyframes[1].pose.camera_center() - keyframes[0].pose.camera_center()).norm()
    } else {
        0.0
    };

    let initial_cost = total_cost(keyframes, points, &index, config);
    let mut cost = initial_cost;
    let mut lambda = config.initial_lambda;
    let mut iterations = 0;
    let mut converged = cost == 0.0;

    while !converged && iterations < config.max_iterations {
        iterations += 1;
        // Linearize.
        let mut u = vec![SMatrix::<f64, 6, 6>::zeros(); n_cam];
        let mut gc = vec![Vector6::zeros(); n_cam];
        let mut blocks: Vec<PointBlock> = Vec::with_capacity(points.len());
        for p in points.iter() {
            let mut blk = PointBlock {
                v: Matrix3::zeros(),
                g: Vector3::zeros(),
                w: Vec::new(),
            };
            for o in &p.observations {
                let k = index[&o.keyframe_id];
                let kf = &keyframes[k];
                let pc = kf.pose.transform_point(&p.position);
                if pc.z <= MIN_DEPTH {
                    continue;
                }
                let c = &kf.camera;
                let r = Vector2::new(c.fx * pc.x / pc.z + c.cx, c.fy * pc.y / pc.z + c.cy) - o.pixel;
                let wt = huber_weight(r.norm_squared() / o.sigma2) / o.sigma2;
                let jpi = projection_jacobian(c, &pc);
                let rot = kf.pose.rotation_matrix();
                let jp = jpi * rot;
                let jc = jpi * point_pose_jacobian(&pc);
                blk.v += jp.transpose() * jp * wt;
                blk.g += jp.transpose() * r * wt;
                let mut cross = jc.transpose() * jp * wt;
                let mut uc = jc.transpose() * jc * wt;
                let mut gcc = jc.transpose() * r * wt;
                if config.use_depth {
                    if let Some(z) = o.depth {
                        let rd = pc.z - z;
                        let wd = huber_weight((rd / config.depth_sigma).powi(2)) / config.depth_sigma.powi(2);
                        let jpd = rot.row(2).into_owned();
                        let jcd = point_pose_jacobian(&pc).row(2).into_owned();
                        blk.v += jpd.transpose() * jpd * wd;
                        blk.g += jpd.transpose() * rd * wd;
                        cross += jcd.transpose() * jpd * wd;
                        uc += jcd.transpose() * jcd * wd;
                        gcc += jcd.transpose() * rd * wd;
                    }
                }
                if let Some(ci) = cam_var[k] {
                    u[ci] += uc;
                    gc[ci] += gcc;
                    blk.w.push((ci, cross));
                }
            }
            blocks.push(blk);
        }

        // Damped Schur complement on the camera block.
        let dim = 6 * n_cam;
        let mut s = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        for (ci, (uc, g)) in u.iter().zip(&gc).enumerate() {
            let mut ud = *uc;
            for d in 0..6 {
                ud[(d, d)] += lambda * uc[(d, d)].max(1e-9);
            }
            s.view_mut((6 * ci, 6 * ci), (6, 6)).add_assign(&ud);
            rhs.rows_mut(6 * ci, 6).add_assign(&(-g));
        }
        let mut v_inv = Vec::with_capacity(blocks.len());
        for blk in &blocks {
            let mut vd = blk.v;
            for d in 0..3 {
                vd[(d, d)] += lambda * blk.v[(d, d)].max(1e-9);
            }
            let vi = vd.try_inverse().unwrap_or_else(Matrix3::zeros);
            for (a, wa) in &blk.w {
                let wv = wa * vi;
                rhs.rows_mut(6 * a, 6).add_assign(&(wv * blk.g));
                for (b, wb) in &blk.w {
                    let m = wv * wb.transpose();
                    s.view_mut((6 * a, 6 * b), (6, 6)).sub_assign(&m);
                }
            }
            v_inv.push(vi);
        }
        let dc = if dim == 0 {
            Some(DVector::zeros(0))
        } else {
            s.clone().cholesky().map(|c| c.solve(&rhs)).or_else(|| s.lu().solve(&rhs))
        };
        let Some(dc) = dc else {
            lambda *= 10.0;
            continue;
        };

        // Candidate state.
        let mut cand_kf = keyframes.to_vec();
        let mut cand_pts = points.to_vec();
        for (k, var) in cam_var.iter().enumerate() {
            if let Some(ci) = var {
                let step = dc.rows(6 * ci, 6);
                let omega = Vector3::new(step[0], step[1], step[2]);
                let v = Vector3::new(step[3], step[4], step[5]);
                cand_kf[k].pose = keyframes[k].pose.retract(&omega, &v);
            }
        }
        for ((p, blk), vi) in cand_pts.iter_mut().zip(&blocks).zip(&v_inv) {
            let mut rhs_p = -blk.g;
            for (a, wa) in &blk.w {
                let dca: Vector6<f64> = dc.fixed_rows::<6>(6 * a).into_owned();
                rhs_p -= wa.transpose() * dca;
            }
            p.position += vi * rhs_p;
        }
        if config.fix_scale && baseline > 0.0 && cand_kf.len() >= 2 {
            let origin = cand_kf[0].pose.camera_center();
            let now = (cand_kf[1].pose.camera_center() - origin).norm();
            if now > 0.0 {
                rescale_about(&mut cand_kf, &mut cand_pts, origin, baseline / now);
            }
        }
        let new_cost = total_cost(&cand_kf, &cand_pts, &index, config);
        if new_cost.is_finite() && new_cost < cost {
            let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
            keyframes.clone_from_slice(&cand_kf);
            points.clone_from_slice(&cand_pts);
            cost = new_cost;
            lambda = (lambda / 10.0).max(1e-15);
            if rel < config.relative_tolerance || cost == 0.0 {
                converged = true;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e16 {
                converged = true;
            }
        }
    }
    Ok(BaReport {
        initial_cost,
        final_cost: cost,
        iterations,
        converged,
    })
}

/// RMS pixel reprojection error over all observations.
pub fn rms_reprojection_error(keyframes: &[Keyframe], points: &[MapPoint]) -> f64 {
    let index = keyframe_index(keyframes);
    let mut sq = 0.0;
    let mut n = 0usize;
    for p in points {
        for o in &p.observations {
            let Some(&k) = index.get(&o.keyframe_id) else { continue };
            let kf = &keyframes[k];
            if let Some(r) = super::robust::residual(&kf.camera, &kf.pose, &p.position, &o.pixel) {
                sq += r.norm_squared();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        (sq / n as f64).sqrt()
    }
}
