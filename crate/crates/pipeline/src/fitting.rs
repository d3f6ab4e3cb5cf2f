//! Map fitting on known poses: the tiny-scene experiments.

use fgo_core::geometry::{GaussianPrimitive, RigidPose};
use fgo_core::optim::{logit, sigmoid, LossBreakdown, MapOptimizer, OptimizeError, OptimizerConfig};
use fgo_core::render::render;
use fgo_core::surface::{extract_mesh, ExtractionConfig, ExtractionError, TriangleMesh};
use fgo_core::tracking::Keyframe;
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::metrics::{depth_l1, psnr, ssim, MetricsError};
use crate::synthetic::{object_gaussians, render_ground_truth, synthetic_camera, DEPTH_ALPHA, OBJECT_RADIUS};

/// Ground truth plus posed, rendered views.
#[derive(Debug, Clone)]
pub struct TinyScene {
    pub gaussians: Vec<GaussianPrimitive>,
    pub views: Vec<Keyframe>,
    pub extent: f64,
}

/// Nearly opaque textured disks tiling a square desk patch of side
/// `2·OBJECT_RADIUS` in the y = 0 plane.
pub fn desk_gaussians(n: usize, rng: &mut impl Rng) -> Vec<GaussianPrimitive> {
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let side = 2.0 * OBJECT_RADIUS;
    let pitch = side / cols.max(rows) as f64;
    (0..n)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            let mean = Vector3::new(
                (c as f64 + 0.5) * pitch - OBJECT_RADIUS,
                0.0,
                (r as f64 + 0.5) * pitch - OBJECT_RADIUS * rows as f64 / cols as f64,
            );
            let flat = UnitQuaternion::rotation_between(&Vector3::z(), &Vector3::y()).expect("not antiparallel");
            let spin = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), rng.gen_range(0.0..std::f64::consts::TAU));
            let a = 0.6 * pitch;
            GaussianPrimitive {
                mean,
                rotation: spin * flat,
                scale: Vector3::new(a * rng.gen_range(0.8..1.2), a * rng.gen_range(0.8..1.2), 0.03 * a),
                opacity: rng.gen_range(0.97..0.995),
                color: Vector3::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TinyKind {
    /// Flat Gaussians on the object sphere, views around it.
    Object,
    /// Flat Gaussians on a desk patch, views from above.
    Desk,
}

/// `n_gaussians` ground-truth Gaussians seen by `n_views` cameras at
/// `size`×`size`.
pub fn tiny_scene(kind: TinyKind, seed: u64, n_gaussians: usize, n_views: usize, size: usize) -> TinyScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = match kind {
        TinyKind::Object => object_gaussians(n_gaussians, &mut rng),
        TinyKind::Desk => desk_gaussians(n_gaussians, &mut rng),
    };
    let camera = synthetic_camera(size, size);
    let views = (0..n_views)
        .into_par_iter()
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n_views as f64;
            let eye = match kind {
                TinyKind::Object => Vector3::new(a.cos(), if i % 2 == 0 { 0.45 } else { -0.45 }, a.sin()),
                TinyKind::Desk => {
                    let r = if i % 2 == 0 { 0.5 } else { 0.3 };
                    Vector3::new(r * a.cos(), 0.8, r * a.sin())
                }
            };
            let pose = RigidPose::look_at(eye, Vector3::zeros(), Vector3::y());
            let (image, depth) = render_ground_truth(&camera, &pose, &gaussians);
            Keyframe {
                id: i,
                timestamp: i as f64,
                pose,
                camera,
                image,
                depth: Some(depth),
                observed_points: Vec::new(),
            }
        })
        .collect();
    TinyScene {
        gaussians,
        views,
        // Diameter of the enclosing sphere: the ball, or the patch diagonal.
        extent: match kind {
            TinyKind::Object => 2.0 * OBJECT_RADIUS,
            TinyKind::Desk => 2.0 * OBJECT_RADIUS * std::f64::consts::SQRT_2,
        },
    }
}

/// Random perturbation of every parameter group; `magnitude` 1 moves means
/// by about 20% of each Gaussian's largest scale.
pub fn perturb(map: &[GaussianPrimitive], seed: u64, magnitude: f64) -> Vec<GaussianPrimitive> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let mut v3 = |s: f64| Vector3::from_fn(|_, _| n.sample(&mut rng) * s);
    map.iter()
        .map(|g| {
            let mean = g.mean + v3(0.2 * magnitude * g.scale.max());
            let rotation = UnitQuaternion::from_scaled_axis(v3(0.1 * magnitude)) * g.rotation;
            let scale = g.scale.component_mul(&v3(0.15 * magnitude).map(f64::exp));
            let color = (g.color + v3(0.1 * magnitude)).map(|c| c.clamp(0.0, 1.0));
            let opacity = sigmoid(logit(g.opacity) + v3(0.5 * magnitude).x);
            GaussianPrimitive {
                mean,
                rotation,
                scale,
                opacity,
                color,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub map: Vec<GaussianPrimitive>,
    pub history: Vec<LossBreakdown>,
}

/// Runs `iterations` optimizer steps over all `views`, each step on a view
/// drawn by the optimizer's seeded generator.
pub fn fit_views(
    init: Vec<GaussianPrimitive>,
    views: &[Keyframe],
    config: &OptimizerConfig,
    iterations: usize,
) -> Result<Fit, OptimizeError> {
    let config = OptimizerConfig {
        window_recent: views.len().max(1),
        window_random: 0,
        ..config.clone()
    };
    let mut opt = MapOptimizer::new(init, config)?;
    opt.optimize_window(views, views.len().saturating_sub(1), iterations)?;
    let history = opt.history().to_vec();
    Ok(Fit {
        map: opt.into_map(),
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewScores {
    pub psnr: f64,
    pub ssim: f64,
    /// Mean over views with valid depth.
    pub depth_l1: Option<f64>,
}

/// Mean image and depth scores of `map` rendered at every view.
pub fn score_views(map: &[GaussianPrimitive], views: &[Keyframe]) -> Result<ViewScores, MetricsError> {
    let per: Vec<(f64, f64, Option<f64>)> = views
        .par_iter()
        .map(|v| {
            let frame = render(&v.camera, &v.pose, map);
            let p = psnr(&frame.color, &v.image)?;
            let s = ssim(&frame.color, &v.image)?;
            let d = match &v.depth {
                Some(gt) => {
                    let mut est = frame.depth.clone();
                    for (d, a) in est.data.iter_mut().zip(&frame.alpha) {
                        if *a < DEPTH_ALPHA {
                            *d = 0.0;
                        }
                    }
                    depth_l1(&est, gt).ok()
                }
                None => None,
            };
            Ok((p, s, d))
        })
        .collect::<Result<_, MetricsError>>()?;
    let n = per.len().max(1) as f64;
    let depths: Vec<f64> = per.iter().filter_map(|x| x.2).collect();
    Ok(ViewScores {
        psnr: per.iter().map(|x| x.0).sum::<f64>() / n,
        ssim: per.iter().map(|x| x.1).sum::<f64>() / n,
        depth_l1: (!depths.is_empty()).then(|| depths.iter().sum::<f64>() / depths.len() as f64),
    })
}

/// Mesh of `map` as seen from `views`.
pub fn extract_from_views(
    map: &[GaussianPrimitive],
    views: &[Keyframe],
    config: &ExtractionConfig,
) -> Result<TriangleMesh, ExtractionError> {
    let v: Vec<_> = views.iter().map(|k| k.view()).collect();
    Ok(extract_mesh(map, &v, config)?.mesh)
}
