//! Colour, depth-distortion and depth-normal losses with analytic gradients
//! with respect to the unconstrained Gaussian parameters.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::{precision_grad_to_params, GaussianGrad, GaussianParams};
use crate::geometry::{GaussianPrimitive, PinholeCamera, RigidPose};
use crate::image::ImageRgb;
use crate::opacity::RaySample;
use crate::render::{pixel_depth_normal, render_full, DepthNormal, FrameRender, ALPHA_EPS, MIN_DEPTH_ALPHA};
use crate::ssim::{ssim, ssim_with_grad};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: rendered {rendered:?}, target {target:?}")]
    ShapeMismatch {
        rendered: (usize, usize),
        target: (usize, usize),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub color: f64,
    pub distortion: f64,
    pub normal: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(color: f64, distortion: f64, normal: f64, alpha: f64, beta: f64) -> Self {
        Self {
            color,
            distortion,
            normal,
            total: color + alpha * distortion + beta * normal,
        }
    }
}

/// Term weights. `color` only scales the gradient; the reported total always
/// counts the colour term once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub color: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_dssim: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, lambda_dssim: f64) -> Self {
        Self {
            color: 1.0,
            alpha,
            beta,
            lambda_dssim,
        }
    }
}

fn check_shape(a: &ImageRgb, b: &ImageRgb) -> Result<(), LossError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch {
            rendered: (a.width, a.height),
            target: (b.width, b.height),
        })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(1−λ)·mean|r−t| + λ·(1−SSIM)/2`.
pub fn color_loss(rendered: &ImageRgb, target: &ImageRgb, lambda_dssim: f64) -> Result<f64, LossError> {
    check_shape(rendered, target)?;
    let n = (rendered.data.len() * 3) as f64;
    let l1: f64 = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b).abs().sum())
        .sum::<f64>()
        / n;
    let dssim = if lambda_dssim > 0.0 {
        (1.0 - ssim(rendered, target)) / 2.0
    } else {
        0.0
    };
    Ok((1.0 - lambda_dssim) * l1 + lambda_dssim * dssim)
}

fn color_loss_grad(rendered: &ImageRgb, target: &ImageRgb, lambda_dssim: f64) -> Vec<Vector3<f64>> {
    let n = (rendered.data.len() * 3) as f64;
    let mut g: Vec<Vector3<f64>> = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b).map(sign) * ((1.0 - lambda_dssim) / n))
        .collect();
    if lambda_dssim > 0.0 {
        let (_, gs) = ssim_with_grad(rendered, target);
        for (dst, s) in g.iter_mut().zip(gs) {
            *dst -= s * (lambda_dssim / 2.0);
        }
    }
    g
}

fn pixel_distortion(sample: &RaySample) -> f64 {
    // Contributions are sorted by d*, so |d_i − d_j| splits into prefix sums.
    let mut w_before = 0.0;
    let mut wd_before = 0.0;
    let mut acc = 0.0;
    for c in &sample.contributions {
        acc += 2.0 * c.weight * (c.d_star * w_before - wd_before);
        w_before += c.weight;
        wd_before += c.weight * c.d_star;
    }
    acc
}

/// Mean over pixels of `Σ_ij ω_i ω_j |d_i − d_j|`.
pub fn depth_distortion_loss(samples: &[RaySample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(pixel_distortion).sum::<f64>() / samples.len() as f64
}

/// Mean over pixels with a non-zero `depth_normals` entry of
/// `Σ_i ω_i (1 − n_i·N)`. `normals` and `depth_normals` must share a frame.
pub fn normal_consistency_loss(
    samples: &[RaySample],
    normals: &[Vec<Vector3<f64>>],
    depth_normals: &[Vector3<f64>],
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((s, ns), big_n) in samples.iter().zip(normals).zip(depth_normals) {
        if *big_n == Vector3::zeros() {
            continue;
        }
        count += 1;
        sum += s
            .contributions
            .iter()
            .zip(ns)
            .map(|(c, n)| c.weight * (1.0 - n.dot(big_n)))
            .sum::<f64>();
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn depth_normals(fr: &FrameRender, camera: &PinholeCamera) -> Vec<Option<DepthNormal>> {
    let (w, h) = (fr.frame.width, fr.frame.height);
    let mut out: Vec<Option<DepthNormal>> = (0..w * h).map(|_| None).collect();
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            out[y * w + x] = pixel_depth_normal(&fr.frame.depth, camera, x, y);
        }
    }
    out
}

fn camera_normals(fr: &FrameRender, pose: &RigidPose) -> Vec<Vec<Vector3<f64>>> {
    let rot = pose.rotation_matrix();
    fr.gaussian_normals
        .iter()
        .map(|ns| ns.iter().map(|n| rot * n).collect())
        .collect()
}

/// Assembles the three terms for an already rendered frame.
pub fn total_loss(
    fr: &FrameRender,
    camera: &PinholeCamera,
    pose: &RigidPose,
    target: &ImageRgb,
    weights: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    let lc = color_loss(&fr.frame.color, target, weights.lambda_dssim)?;
    let ld = depth_distortion_loss(&fr.samples);
    let big_n: Vec<Vector3<f64>> = depth_normals(fr, camera)
        .into_iter()
        .map(|d| d.map(|d| d.normal).unwrap_or_else(Vector3::zeros))
        .collect();
    let ln = normal_consistency_loss(&fr.samples, &camera_normals(fr, pose), &big_n);
    Ok(LossBreakdown::new(lc, ld, ln, weights.alpha, weights.beta))
}

#[derive(Clone, Copy)]
struct Accum {
    mean: Vector3<f64>,
    precision: Matrix3<f64>,
    opacity: f64,
    color: Vector3<f64>,
}

impl Accum {
    fn zero() -> Self {
        Self {
            mean: Vector3::zeros(),
            precision: Matrix3::zeros(),
            opacity: 0.0,
            color: Vector3::zeros(),
        }
    }
}

/// Per-pixel upstream gradients that feed the compositing backward pass.
struct PixelAdjoint {
    color: Vector3<f64>,
    depth: f64,
    /// `(∂L/∂n_i weight, N)` when the depth-normal term is active here.
    normal: Option<(f64, Vector3<f64>)>,
}

const CHUNKS: usize = 16;

/// Renders the frame, evaluates the loss and back-propagates to the
/// parameters. `map[i]` must be the primitive of `params[i]`.
pub fn loss_and_gradient(
    params: &[GaussianParams],
    map: &[GaussianPrimitive],
    camera: &PinholeCamera,
    pose: &RigidPose,
    target: &ImageRgb,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<GaussianGrad>), LossError> {
    assert_eq!(params.len(), map.len(), "params and map differ in length");
    let fr = render_full(camera, pose, map);
    check_shape(&fr.frame.color, target)?;
    let (w, h) = (fr.frame.width, fr.frame.height);
    let npix = w * h;

    let lc = color_loss(&fr.frame.color, target, weights.lambda_dssim)?;
    let ld = depth_distortion_loss(&fr.samples);
    let dns = depth_normals(&fr, camera);
    let cam_normals = camera_normals(&fr, pose);
    let big_n: Vec<Vector3<f64>> = dns
        .iter()
        .map(|d| d.as_ref().map(|d| d.normal).unwrap_or_else(Vector3::zeros))
        .collect();
    let ln = normal_consistency_loss(&fr.samples, &cam_normals, &big_n);
    let breakdown = LossBreakdown::new(lc, ld, ln, weights.alpha, weights.beta);

    let g_color = if weights.color != 0.0 {
        color_loss_grad(&fr.frame.color, target, weights.lambda_dssim)
            .into_iter()
            .map(|g| g * weights.color)
            .collect()
    } else {
        vec![Vector3::zeros(); npix]
    };

    // Normal term: gradient into N, then into the depth map.
    let n_valid = dns.iter().filter(|d| d.is_some()).count();
    let wn = if n_valid > 0 { weights.beta / n_valid as f64 } else { 0.0 };
    let mut g_depth = vec![0.0; npix];
    if wn != 0.0 {
        for (p, dn) in dns.iter().enumerate() {
            let Some(dn) = dn else { continue };
            let mut g_n = Vector3::zeros();
            for (c, n) in fr.samples[p].contributions.iter().zip(&cam_normals[p]) {
                g_n -= n * (wn * c.weight);
            }
            let len = dn.cross.norm();
            let c_hat = dn.cross / len;
            let g_cross = (g_n - c_hat * c_hat.dot(&g_n)) * (dn.sign / len);
            let g_vr = dn.v_down.cross(&g_cross);
            let g_vd = g_cross.cross(&dn.v_right);
            let [k0, k1, k2] = dn.rays;
            g_depth[p] -= k0.dot(&(g_vr + g_vd));
            g_depth[p + 1] += k1.dot(&g_vr);
            g_depth[p + w] += k2.dot(&g_vd);
        }
    }

    let adjoint = |p: usize| PixelAdjoint {
        color: g_color[p],
        depth: g_depth[p],
        normal: if wn != 0.0 {
            dns[p].as_ref().map(|d| (wn, d.normal))
        } else {
            None
        },
    };

    let precisions: Vec<Matrix3<f64>> = map.iter().map(|g| g.precision()).collect();
    let pose_rot_t = pose.rotation_matrix().transpose();
    let wd = weights.alpha / npix.max(1) as f64;
    let rows_per_chunk = h.div_ceil(CHUNKS).max(1);
    let chunk_ranges: Vec<(usize, usize)> = (0..h)
        .step_by(rows_per_chunk)
        .map(|y0| (y0, (y0 + rows_per_chunk).min(h)))
        .collect();

    let partials: Vec<Vec<Accum>> = chunk_ranges
        .par_iter()
        .map(|&(y0, y1)| {
            let mut acc = vec![Accum::zero(); map.len()];
            for p in y0 * w..y1 * w {
                backward_pixel(
                    &fr,
                    p,
                    &adjoint(p),
                    map,
                    &precisions,
                    &cam_normals[p],
                    &pose_rot_t,
                    wd,
                    &mut acc,
                );
            }
            acc
        })
        .collect();

    let mut total = vec![Accum::zero(); map.len()];
    for part in partials {
        for (t, a) in total.iter_mut().zip(part) {
            t.mean += a.mean;
            t.precision += a.precision;
            t.opacity += a.opacity;
            t.color += a.color;
        }
    }

    let grads = total
        .iter()
        .zip(params)
        .zip(map)
        .map(|((a, p), g)| {
            let (rotation, log_scale) = precision_grad_to_params(p, &a.precision);
            GaussianGrad {
                mean: a.mean,
                rotation,
                log_scale,
                logit_opacity: a.opacity * g.opacity * (1.0 - g.opacity),
                color: a.color,
            }
        })
        .collect();
    Ok((breakdown, grads))
}

#[allow(clippy::too_many_arguments)]
fn backward_pixel(
    fr: &FrameRender,
    p: usize,
    adj: &PixelAdjoint,
    map: &[GaussianPrimitive],
    precisions: &[Matrix3<f64>],
    cam_normals: &[Vector3<f64>],
    pose_rot_t: &Matrix3<f64>,
    wd: f64,
    acc: &mut [Accum],
) {
    let sample = &fr.samples[p];
    let cs = &sample.contributions;
    let k = cs.len();
    if k == 0 {
        return;
    }
    let total_alpha = fr.frame.alpha[p];
    let z = fr.z_factor[p];

    let mut g_w = vec![0.0; k];
    let mut g_d = vec![0.0; k];
    let mut g_n: Vec<Vector3<f64>> = vec![Vector3::zeros(); k];

    for (i, c) in cs.iter().enumerate() {
        g_w[i] += adj.color.dot(&map[c.gaussian_id].color);
    }
    if adj.depth != 0.0 && total_alpha >= MIN_DEPTH_ALPHA {
        let a = total_alpha.max(ALPHA_EPS);
        let mean_d = cs.iter().map(|c| c.weight * c.d_star).sum::<f64>() / a;
        for (i, c) in cs.iter().enumerate() {
            g_w[i] += adj.depth * z * (c.d_star - mean_d) / a;
            g_d[i] += adj.depth * z * c.weight / a;
        }
    }
    if wd != 0.0 {
        let total_w: f64 = cs.iter().map(|c| c.weight).sum();
        let mut before = 0.0;
        for (i, c) in cs.iter().enumerate() {
            let after = total_w - before - c.weight;
            g_d[i] += wd * 2.0 * c.weight * (before - after);
            before += c.weight;
        }
    }
    if let Some((wn, big_n)) = adj.normal {
        for (i, c) in cs.iter().enumerate() {
            g_w[i] += wn * (1.0 - cam_normals[i].dot(&big_n));
            g_n[i] = pose_rot_t * (big_n * (-wn * c.weight));
        }
    }

    // Front-to-back transmittance, then the reverse alpha recursion.
    let alphas: Vec<f64> = cs.iter().map(|c| map[c.gaussian_id].opacity * c.g_max).collect();
    let mut trans = vec![1.0; k];
    for i in 1..k {
        trans[i] = trans[i - 1] * (1.0 - alphas[i - 1]);
    }
    let mut g_alpha = vec![0.0; k];
    let mut suffix = 0.0;
    for i in (0..k).rev() {
        g_alpha[i] = trans[i] * (g_w[i] - suffix);
        suffix = g_w[i] * alphas[i] + (1.0 - alphas[i]) * suffix;
    }

    let o = sample.ray.origin;
    let r = sample.ray.direction;
    for (i, c) in cs.iter().enumerate() {
        let id = c.gaussian_id;
        let g = &map[id];
        let a_acc = &mut acc[id];
        a_acc.color += adj.color * c.weight;
        a_acc.opacity += g_alpha[i] * c.g_max;
        let g_g = g_alpha[i] * g.opacity;

        let prec = &precisions[id];
        let e = o - g.mean;
        let pr = prec * r;
        let pe = prec * e;
        let a = r.dot(&pr);
        let b = e.dot(&pr);
        let g_q = -0.5 * c.g_max * g_g;
        let g_b = -g_d[i] / a - g_q * 2.0 * b / a;
        let g_a = g_d[i] * b / (a * a) + g_q * b * b / (a * a);
        let g_c = g_q;
        let mut g_prec = r * r.transpose() * g_a + e * r.transpose() * g_b + e * e.transpose() * g_c;
        if g_n[i] != Vector3::zeros() {
            let m_len = pr.norm();
            let m_hat = pr / m_len;
            let g_m = -(g_n[i] - m_hat * m_hat.dot(&g_n[i])) / m_len;
            g_prec += g_m * r.transpose();
        }
        a_acc.precision += g_prec;
        let g_e = pr * g_b + pe * (2.0 * g_c);
        a_acc.mean -= g_e;
    }
}
