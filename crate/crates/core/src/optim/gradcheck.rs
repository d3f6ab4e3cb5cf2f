//! Central finite-difference verification of the analytic loss gradients.
//!
//! The distortion term is differentiated with its mixing weights frozen, the
//! same way the analytic gradient treats it. Samples whose stencil straddles
//! a kink (a depth-order swap, the contribution cutoff, a depth-validity
//! change) are detected by comparing step sizes `h` and `h/2` and skipped.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{loss_and_gradient, total_loss, LossBreakdown, LossWeights};
use super::params::{GaussianParams, PARAM_DIM};
use crate::geometry::{GaussianPrimitive, PinholeCamera, RigidPose};
use crate::image::ImageRgb;
use crate::opacity::max_contribution;
use crate::render::{render_full, FrameRender};

/// One differentiable rendering problem.
#[derive(Debug, Clone)]
pub struct GradCheckScene {
    pub camera: PinholeCamera,
    pub pose: RigidPose,
    pub params: Vec<GaussianParams>,
    pub target: ImageRgb,
}

impl GradCheckScene {
    /// 3 to `max_gaussians` random Gaussians in front of a `size`² camera,
    /// a small random pose, random target, off-unit quaternions.
    pub fn random(seed: u64, max_gaussians: usize, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = size as f64;
        let camera = PinholeCamera::new(f, f, f / 2.0, f / 2.0, size, size).expect("valid camera");
        let pose = RigidPose::from_camera_to_world(
            UnitQuaternion::from_scaled_axis(Vector3::new(
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            )),
            Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), 0.0),
        );
        let n = rng.gen_range(3..=max_gaussians.max(3));
        let params = (0..n)
            .map(|_| {
                let g = GaussianPrimitive {
                    mean: Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(2.0..3.0)),
                    rotation: UnitQuaternion::from_scaled_axis(Vector3::new(
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                    )),
                    scale: Vector3::new(rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4), rng.gen_range(0.05..0.4)),
                    opacity: rng.gen_range(0.3..0.9),
                    color: Vector3::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
                };
                let mut p = GaussianParams::from_primitive(&g);
                p.rotation *= rng.gen_range(0.7..1.4);
                p
            })
            .collect();
        let mut target = ImageRgb::new(size, size);
        for px in target.data.iter_mut() {
            *px = Vector3::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        }
        Self {
            camera,
            pose,
            params,
            target,
        }
    }

    fn primitives(params: &[GaussianParams]) -> Vec<GaussianPrimitive> {
        params.iter().map(|p| p.to_primitive()).collect()
    }

    fn evaluate(&self, params: &[GaussianParams], weights: &LossWeights) -> LossBreakdown {
        let fr = render_full(&self.camera, &self.pose, &Self::primitives(params));
        total_loss(&fr, &self.camera, &self.pose, &self.target, weights).expect("shapes match")
    }
}

/// Distortion with the mixing weights of `base`; only peak depths move.
fn frozen_distortion(base: &FrameRender, params: &[GaussianParams]) -> f64 {
    let map = GradCheckScene::primitives(params);
    let mut total = 0.0;
    for s in &base.samples {
        let d: Vec<f64> = s
            .contributions
            .iter()
            .map(|c| max_contribution(&map[c.gaussian_id], &s.ray).map_or(0.0, |m| m.0))
            .collect();
        for (i, a) in s.contributions.iter().enumerate() {
            for (j, b) in s.contributions.iter().enumerate() {
                total += a.weight * b.weight * (d[i] - d[j]).abs();
            }
        }
    }
    total / base.samples.len().max(1) as f64
}

fn perturbed(params: &[GaussianParams], g: usize, k: usize, h: f64) -> Vec<GaussianParams> {
    let mut out = params.to_vec();
    let mut a = out[g].to_array();
    a[k] += h;
    out[g] = GaussianParams::from_array(&a);
    out
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Outcome over all parameters of one or more scenes. Errors are indexed
/// colour, distortion, normal, total.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub worst: [f64; 4],
    /// Largest |analytic distortion gradient| over opacity and colour
    /// parameters; zero when the weights are decoupled.
    pub distortion_opacity_leak: f64,
    /// `(gaussian, parameter, term)` above tolerance.
    pub failures: Vec<(usize, usize, usize)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        for t in 0..4 {
            self.worst[t] = self.worst[t].max(other.worst[t]);
        }
        self.distortion_opacity_leak = self.distortion_opacity_leak.max(other.distortion_opacity_leak);
        self.failures.extend(other.failures);
    }
}

/// Compare analytic and central-difference gradients of every parameter of
/// `scene` under `weights` (whose alpha/beta combine the total).
pub fn check_gradients(scene: &GradCheckScene, weights: &LossWeights, h: f64, tolerance: f64) -> GradCheckReport {
    let map = GradCheckScene::primitives(&scene.params);
    let base = render_full(&scene.camera, &scene.pose, &map);
    let lambda = weights.lambda_dssim;
    let grad_for = |w: LossWeights| {
        loss_and_gradient(&scene.params, &map, &scene.camera, &scene.pose, &scene.target, &w)
            .expect("shapes match")
            .1
    };
    let analytic = [
        grad_for(LossWeights { color: 1.0, alpha: 0.0, beta: 0.0, lambda_dssim: lambda }),
        grad_for(LossWeights { color: 0.0, alpha: 1.0, beta: 0.0, lambda_dssim: lambda }),
        grad_for(LossWeights { color: 0.0, alpha: 0.0, beta: 1.0, lambda_dssim: lambda }),
        grad_for(*weights),
    ];
    let component_weights = LossWeights { color: 1.0, alpha: 0.0, beta: 0.0, lambda_dssim: lambda };
    let fd = |g: usize, k: usize, h: f64| {
        let p = perturbed(&scene.params, g, k, h);
        let m = perturbed(&scene.params, g, k, -h);
        let (bp, bm) = (scene.evaluate(&p, &component_weights), scene.evaluate(&m, &component_weights));
        let c = (bp.color - bm.color) / (2.0 * h);
        let d = (frozen_distortion(&base, &p) - frozen_distortion(&base, &m)) / (2.0 * h);
        let n = (bp.normal - bm.normal) / (2.0 * h);
        [c, d, n, c + weights.alpha * d + weights.beta * n]
    };

    let mut report = GradCheckReport::default();
    for g in 0..scene.params.len() {
        let dg = &analytic[1][g];
        report.distortion_opacity_leak = report
            .distortion_opacity_leak
            .max(dg.logit_opacity.abs())
            .max(dg.color.amax());
        for k in 0..PARAM_DIM {
            let full = fd(g, k, h);
            let half = fd(g, k, h / 2.0);
            if (0..4).any(|t| relative_error(full[t], half[t]) >= 1e-4) {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            for t in 0..4 {
                let e = relative_error(analytic[t][g].to_array()[k], full[t]);
                report.worst[t] = report.worst[t].max(e);
                if e >= tolerance {
                    report.failures.push((g, k, t));
                }
            }
        }
    }
    report
}
