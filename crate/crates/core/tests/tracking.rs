//! Bundle adjustment and loop correction on synthetic scenes.

use std::collections::HashMap;

use fgo_core::geometry::{project, umeyama_align, PinholeCamera, RigidPose, SimilarityTransform};
use fgo_core::image::ImageRgb;
use fgo_core::tracking::{
    apply_loop_correction, correct_loop, detect_loop, global_ba, rms_reprojection_error, BaConfig, Keyframe,
    LoopConfig, LoopConstraint, MapPoint, Observation,
};
use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn camera() -> PinholeCamera {
    PinholeCamera::new(300.0, 300.0, 160.0, 120.0, 320, 240).unwrap()
}

fn desk_camera() -> PinholeCamera {
    PinholeCamera::new(525.0, 525.0, 319.5, 239.5, 640, 480).unwrap()
}

fn keyframe(id: usize, pose: RigidPose) -> Keyframe {
    Keyframe {
        id,
        timestamp: id as f64,
        pose,
        camera: camera(),
        image: ImageRgb::new(1, 1),
        depth: None,
        observed_points: Vec::new(),
    }
}

fn visible(pose: &RigidPose, p: &Vector3<f64>) -> Option<Vector2<f64>> {
    visible_in(&camera(), pose, p)
}

fn visible_in(cam: &PinholeCamera, pose: &RigidPose, p: &Vector3<f64>) -> Option<Vector2<f64>> {
    let pc = pose.transform_point(p);
    if pc.z < 0.3 {
        return None;
    }
    let u = project(cam, pose, p).ok()?;
    cam.contains(&u).then_some(u)
}

fn centers(kfs: &[Keyframe]) -> Vec<Vector3<f64>> {
    kfs.iter().map(|k| k.pose.camera_center()).collect()
}

fn ate(est: &[Vector3<f64>], gt: &[Vector3<f64>], with_scale: bool) -> f64 {
    let s = umeyama_align(est, gt, with_scale).unwrap();
    (est.iter().zip(gt).map(|(e, g)| (s.apply(e) - g).norm_squared()).sum::<f64>() / est.len() as f64).sqrt()
}

/// Desk scale: 10 keyframes on an arc looking at a cloud of 200 points.
fn ba_scene(seed: u64) -> (Vec<Keyframe>, Vec<MapPoint>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kfs: Vec<Keyframe> = (0..10)
        .map(|i| {
            let a = -1.5 + i as f64 * 0.33;
            let eye = Vector3::new(0.8 * a.sin(), 0.1 * (i as f64 * 0.7).sin(), -0.8 * a.cos());
            let mut kf = keyframe(i, RigidPose::look_at(eye, Vector3::zeros(), Vector3::y()));
            kf.camera = desk_camera();
            kf
        })
        .collect();
    let mut points = Vec::new();
    while points.len() < 200 {
        let p = Vector3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.3..0.3), rng.gen_range(-0.4..0.4));
        let mut mp = MapPoint::new(points.len(), p);
        for kf in &kfs {
            if let Some(u) = visible_in(&desk_camera(), &kf.pose, &p) {
                mp.observations.push(Observation::new(kf.id, u, 1.0));
            }
        }
        if mp.observations.len() >= 2 {
            points.push(mp);
        }
    }
    (kfs, points)
}

fn perturb(kfs: &mut [Keyframe], points: &mut [MapPoint], mag: f64, rng: &mut ChaCha8Rng) {
    for kf in kfs.iter_mut().skip(1) {
        let w = Vector3::from_fn(|_, _| rng.gen_range(-mag..mag));
        let v = Vector3::from_fn(|_, _| rng.gen_range(-mag..mag));
        kf.pose = kf.pose.retract(&w, &v);
    }
    for p in points.iter_mut() {
        p.position += Vector3::from_fn(|_, _| rng.gen_range(-mag..mag));
    }
}

#[test]
fn ba_noise_free_reaches_zero_reprojection() {
    let (mut kfs, mut pts) = ba_scene(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    perturb(&mut kfs, &mut pts, 1e-2, &mut rng);
    let before = rms_reprojection_error(&kfs, &pts);
    let report = global_ba(&mut kfs, &mut pts, &BaConfig::default()).unwrap();
    let after = rms_reprojection_error(&kfs, &pts);
    assert!(report.final_cost <= report.initial_cost);
    assert!(after < 1e-8, "rms {before} -> {after}");
}

#[test]
fn ba_with_pixel_noise_shrinks_trajectory_error() {
    let (gt_kfs, gt_pts) = ba_scene(3);
    let mut kfs = gt_kfs.clone();
    let mut pts = gt_pts.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for p in pts.iter_mut() {
        for o in p.observations.iter_mut() {
            o.pixel += Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        }
    }
    let perturbation = 1e-2;
    perturb(&mut kfs, &mut pts, perturbation, &mut rng);
    let gt = centers(&gt_kfs);
    global_ba(&mut kfs, &mut pts, &BaConfig::default()).unwrap();
    let after = ate(&centers(&kfs), &gt, true);
    assert!(after * 10.0 <= perturbation, "ATE {after}");
}

#[test]
fn ba_is_gauge_invariant() {
    let (gt_kfs, gt_pts) = ba_scene(5);
    let run = |t: &RigidPose| {
        let s = SimilarityTransform::from_rigid(t);
        let mut kfs: Vec<Keyframe> = gt_kfs.clone();
        let mut pts = gt_pts.clone();
        for kf in kfs.iter_mut() {
            kf.pose = s.transform_camera(&kf.pose);
        }
        for p in pts.iter_mut() {
            p.position = s.apply(&p.position);
        }
        let gt = centers(&kfs);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for p in pts.iter_mut() {
            for o in p.observations.iter_mut() {
                o.pixel += Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            }
        }
        global_ba(&mut kfs, &mut pts, &BaConfig::default()).unwrap();
        ate(&centers(&kfs), &gt, true)
    };
    let a = run(&RigidPose::identity());
    let b = run(&RigidPose::new(
        UnitQuaternion::from_scaled_axis(Vector3::new(0.3, -1.2, 0.4)),
        Vector3::new(5.0, -2.0, 1.0),
    ));
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
}

#[test]
fn points_only_ba_is_multiview_triangulation() {
    let (kfs, gt_pts) = ba_scene(7);
    let mut kfs = kfs;
    let mut pts = gt_pts.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for p in pts.iter_mut() {
        p.position += Vector3::from_fn(|_, _| rng.gen_range(-0.05..0.05));
    }
    let before = kfs.clone();
    let cfg = BaConfig {
        optimize_poses: false,
        ..BaConfig::default()
    };
    global_ba(&mut kfs, &mut pts, &cfg).unwrap();
    assert_eq!(kfs, before);
    for (p, g) in pts.iter().zip(&gt_pts) {
        assert!((p.position - g.position).norm() < 1e-9);
    }
}

/// Room with landmark-covered walls; the camera circles a square path while
/// turning a full revolution, so the last frame revisits the first view.
struct LoopScene {
    gt_poses: Vec<RigidPose>,
    landmarks: Vec<Vector3<f64>>,
}

fn square_loop(n: usize) -> LoopScene {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut landmarks = Vec::new();
    for wall in 0..4 {
        for _ in 0..300 {
            let a = rng.gen_range(-4.0..4.0);
            let y = rng.gen_range(-1.5..1.5);
            let p = match wall {
                0 => Vector3::new(4.0, y, a),
                1 => Vector3::new(-4.0, y, a),
                2 => Vector3::new(a, y, 4.0),
                _ => Vector3::new(a, y, -4.0),
            };
            landmarks.push(p);
        }
    }
    let corners = [
        Vector3::new(-1.0, 0.0, -1.0),
        Vector3::new(1.0, 0.0, -1.0),
        Vector3::new(1.0, 0.0, 1.0),
        Vector3::new(-1.0, 0.0, 1.0),
    ];
    let gt_poses = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let seg = ((t * 4.0).floor() as usize).min(3);
            let f = t * 4.0 - seg as f64;
            let pos = corners[seg] * (1.0 - f) + corners[(seg + 1) % 4] * f;
            let yaw = t * std::f64::consts::TAU;
            let dir = Vector3::new(yaw.cos(), 0.0, yaw.sin());
            RigidPose::look_at(pos, pos + dir, Vector3::y())
        })
        .collect();
    LoopScene { gt_poses, landmarks }
}

/// Simulates odometry: each keyframe's estimate is the ground truth moved by
/// a drift that grows linearly to `final_drift`; landmarks lose their track
/// after `window` keyframes without observation and then get a new point.
fn drifted_run(scene: &LoopScene, final_drift: &SimilarityTransform, window: usize) -> (Vec<Keyframe>, Vec<MapPoint>) {
    let n = scene.gt_poses.len();
    let drift = |k: usize| final_drift.interpolate(k as f64 / (n - 1) as f64);
    let mut kfs: Vec<Keyframe> =
        (0..n).map(|k| keyframe(k, drift(k).transform_camera(&scene.gt_poses[k]))).collect();
    let mut points: Vec<MapPoint> = Vec::new();
    let mut track: HashMap<usize, (usize, usize)> = HashMap::new(); // landmark -> (point index, last seen)
    for k in 0..n {
        for (l, p) in scene.landmarks.iter().enumerate() {
            let Some(u) = visible(&scene.gt_poses[k], p) else { continue };
            let idx = match track.get(&l) {
                Some(&(idx, last)) if k - last <= window => idx,
                _ => {
                    let mut mp = MapPoint::new(points.len(), drift(k).apply(p));
                    mp.descriptor = l as u64;
                    points.push(mp);
                    points.len() - 1
                }
            };
            track.insert(l, (idx, k));
            points[idx].observations.push(Observation::new(k, u, 1.0));
            kfs[k].observed_points.push(points[idx].id);
        }
    }
    (kfs, points)
}

#[test]
fn straight_line_has_no_loop() {
    let mut kfs = Vec::new();
    let mut points = Vec::new();
    for k in 0..80 {
        let eye = Vector3::new(k as f64 * 0.1, 0.0, 0.0);
        let mut kf = keyframe(k, RigidPose::look_at(eye, eye + Vector3::z(), Vector3::y()));
        // Each frame sees its own fresh features plus a few from its neighbour.
        for j in 0..10 {
            let mut p = MapPoint::new(points.len(), Vector3::new(k as f64 * 0.1, 0.0, 3.0));
            p.descriptor = (k * 10 + j) as u64;
            kf.observed_points.push(p.id);
            points.push(p);
        }
        kfs.push(kf);
    }
    assert!(detect_loop(&kfs, &points, 79, &LoopConfig::default()).is_none());
}

#[test]
fn square_loop_is_detected_and_respects_min_gap() {
    let scene = square_loop(80);
    let (kfs, points) = drifted_run(&scene, &SimilarityTransform::identity(), 10);
    let c = detect_loop(&kfs, &points, 79, &LoopConfig::default()).expect("loop");
    assert_eq!(c.b, 79);
    assert!(c.a <= 5, "matched keyframe {}", c.a);
    assert!(c.matches.len() >= 3);
    let strict = LoopConfig {
        min_gap: 90,
        ..LoopConfig::default()
    };
    assert!(detect_loop(&kfs, &points, 79, &strict).is_none());
}

#[test]
fn identity_constraint_changes_nothing() {
    let scene = square_loop(80);
    let (mut kfs, mut points) = drifted_run(&scene, &SimilarityTransform::identity(), 10);
    let (k0, p0) = (kfs.clone(), points.clone());
    let c = LoopConstraint {
        a: 0,
        b: 79,
        correction: SimilarityTransform::identity(),
        matches: vec![],
    };
    apply_loop_correction(&mut kfs, &mut points, &c);
    assert_eq!(kfs, k0);
    assert_eq!(points, p0);
}

fn run_loop_closure(final_drift: SimilarityTransform, with_scale: bool) -> (Vec<Keyframe>, LoopScene, f64) {
    let scene = square_loop(80);
    let (mut kfs, mut points) = drifted_run(&scene, &final_drift, 10);
    let gap_before = (kfs[79].pose.camera_center() - kfs[0].pose.camera_center()).norm();
    let cfg = LoopConfig {
        with_scale,
        ..LoopConfig::default()
    };
    let c = detect_loop(&kfs, &points, 79, &cfg).expect("loop");
    let before = kfs.clone();
    apply_loop_correction(&mut kfs, &mut points.clone(), &c);
    // The uncorrected side is untouched, so its relative poses are too.
    for k in 0..=c.a {
        assert_eq!(kfs[k].pose, before[k].pose);
    }
    let mut kfs = before;
    let ba = BaConfig {
        fix_scale: with_scale,
        ..BaConfig::default()
    };
    correct_loop(&mut kfs, &mut points, &c, &ba).unwrap();
    (kfs, scene, gap_before)
}

#[test]
fn drift_of_twenty_centimetres_is_closed() {
    let drift = SimilarityTransform::new(
        1.0,
        UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.02, 0.0)),
        Vector3::new(0.2, 0.0, 0.0),
    );
    let (kfs, _, gap_before) = run_loop_closure(drift, false);
    let gap = (kfs[79].pose.camera_center() - kfs[0].pose.camera_center()).norm();
    assert!(gap_before > 0.15);
    assert!(gap < 1e-3, "gap {gap_before} -> {gap}");
}

#[test]
fn monocular_scale_drift_is_corrected() {
    let drift = SimilarityTransform::new(0.9, UnitQuaternion::identity(), Vector3::zeros());
    let (kfs, scene, _) = run_loop_closure(drift, true);
    let est = centers(&kfs);
    let gt: Vec<Vector3<f64>> = scene.gt_poses.iter().map(|p| p.camera_center()).collect();
    let s = umeyama_align(&est, &gt, true).unwrap();
    assert!((s.scale - 1.0).abs() < 0.01, "scale {}", s.scale);
}

