//! Per-pixel ray-Gaussian rendering of colour, depth, normal and alpha maps.
//!
//! Every pixel casts one exact ray; Gaussians are rejected by their 3σ AABB
//! and composited front to back in `d*` order.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::geometry::{GaussianPrimitive, PinholeCamera, Ray, RigidPose};
use crate::image::{DepthMap, ImageRgb};
use crate::opacity::RaySample;

/// Pixels whose accumulated alpha is below this get zero depth.
pub const MIN_DEPTH_ALPHA: f64 = 1e-4;
pub const ALPHA_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub width: usize,
    pub height: usize,
    pub color: ImageRgb,
    /// Camera z-depth, metres.
    pub depth: DepthMap,
    /// World-frame unit normals, or zero where nothing was hit.
    pub normal: Vec<Vector3<f64>>,
    pub alpha: Vec<f64>,
}

/// Forward pass with the per-pixel compositing records kept around for the
/// loss terms and their gradients.
#[derive(Debug, Clone)]
pub struct FrameRender {
    pub frame: RenderedFrame,
    pub samples: Vec<RaySample>,
    /// World-frame normal of each contribution, parallel to `samples`.
    pub gaussian_normals: Vec<Vec<Vector3<f64>>>,
    /// Ratio of camera z-depth to ray distance per pixel.
    pub z_factor: Vec<f64>,
}

/// World-frame normal of the plane on which the Gaussian's 1D responses peak
/// for rays of this direction: `-normalize(Σ⁻¹ r)`. It always faces the camera.
pub fn gaussian_normal(g: &GaussianPrimitive, ray: &Ray) -> Vector3<f64> {
    let m = g.precision() * ray.direction;
    -m.normalize()
}

struct PixelOut {
    sample: RaySample,
    normals: Vec<Vector3<f64>>,
    color: Vector3<f64>,
    alpha: f64,
    depth: f64,
    normal: Vector3<f64>,
    z_factor: f64,
}

fn shade_pixel(
    camera: &PinholeCamera,
    pose: &RigidPose,
    map: &[GaussianPrimitive],
    x: usize,
    y: usize,
) -> PixelOut {
    let dir_cam = camera.unproject(x as f64, y as f64);
    let z_factor = 1.0 / dir_cam.norm();
    let ray = Ray::through_pixel(camera, pose, x as f64, y as f64);
    let sample = RaySample::build(ray, map);
    let mut color = Vector3::zeros();
    let mut alpha = 0.0;
    let mut depth_acc = 0.0;
    let mut normal_acc = Vector3::zeros();
    let mut normals = Vec::with_capacity(sample.contributions.len());
    for c in &sample.contributions {
        let g = &map[c.gaussian_id];
        let n = gaussian_normal(g, &ray);
        color += g.color * c.weight;
        alpha += c.weight;
        depth_acc += c.weight * c.d_star;
        normal_acc += n * c.weight;
        normals.push(n);
    }
    let depth = if alpha >= MIN_DEPTH_ALPHA {
        z_factor * depth_acc / alpha.max(ALPHA_EPS)
    } else {
        0.0
    };
    let nn = normal_acc.norm();
    let normal = if nn > 1e-12 {
        normal_acc / nn
    } else {
        Vector3::zeros()
    };
    PixelOut {
        sample,
        normals,
        color,
        alpha,
        depth,
        normal,
        z_factor,
    }
}

/// Full forward pass keeping the compositing records.
pub fn render_full(camera: &PinholeCamera, pose: &RigidPose, map: &[GaussianPrimitive]) -> FrameRender {
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<PixelOut>> = (0..h)
        .into_par_iter()
        .map(|y| (0..w).map(|x| shade_pixel(camera, pose, map, x, y)).collect())
        .collect();

    let mut color = ImageRgb::new(w, h);
    let mut depth = DepthMap::new(w, h);
    let mut normal = Vec::with_capacity(w * h);
    let mut alpha = Vec::with_capacity(w * h);
    let mut samples = Vec::with_capacity(w * h);
    let mut gaussian_normals = Vec::with_capacity(w * h);
    let mut z_factor = Vec::with_capacity(w * h);
    for (i, px) in rows.into_iter().flatten().enumerate() {
        color.data[i] = px.color;
        depth.data[i] = px.depth;
        normal.push(px.normal);
        alpha.push(px.alpha);
        samples.push(px.sample);
        gaussian_normals.push(px.normals);
        z_factor.push(px.z_factor);
    }
    FrameRender {
        frame: RenderedFrame {
            width: w,
            height: h,
            color,
            depth,
            normal,
            alpha,
        },
        samples,
        gaussian_normals,
        z_factor,
    }
}

pub fn render(camera: &PinholeCamera, pose: &RigidPose, map: &[GaussianPrimitive]) -> RenderedFrame {
    render_full(camera, pose, map).frame
}

/// Camera-frame normals from a z-depth map: cross product of the right and
/// down neighbour offsets, oriented toward the camera. Zero where the pixel or
/// either neighbour has no depth.
pub fn depth_to_normal(depth: &DepthMap, camera: &PinholeCamera) -> Vec<Vector3<f64>> {
    let (w, h) = (depth.width, depth.height);
    let mut out = vec![Vector3::zeros(); w * h];
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            if let Some(n) = pixel_depth_normal(depth, camera, x, y) {
                out[y * w + x] = n.normal;
            }
        }
    }
    out
}

/// Intermediate quantities of one depth-derived normal, kept for backprop.
pub(crate) struct DepthNormal {
    pub normal: Vector3<f64>,
    /// Unnormalized cross product.
    pub cross: Vector3<f64>,
    pub sign: f64,
    pub v_right: Vector3<f64>,
    pub v_down: Vector3<f64>,
    pub rays: [Vector3<f64>; 3],
}

pub(crate) fn pixel_depth_normal(
    depth: &DepthMap,
    camera: &PinholeCamera,
    x: usize,
    y: usize,
) -> Option<DepthNormal> {
    let w = depth.width;
    let d0 = depth.data[y * w + x];
    let d1 = depth.data[y * w + x + 1];
    let d2 = depth.data[(y + 1) * w + x];
    if d0 <= 0.0 || d1 <= 0.0 || d2 <= 0.0 {
        return None;
    }
    let k0 = camera.unproject(x as f64, y as f64);
    let k1 = camera.unproject((x + 1) as f64, y as f64);
    let k2 = camera.unproject(x as f64, (y + 1) as f64);
    let p0 = k0 * d0;
    let v_right = k1 * d1 - p0;
    let v_down = k2 * d2 - p0;
    let cross = v_right.cross(&v_down);
    let len = cross.norm();
    if len < 1e-300 {
        return None;
    }
    let sign = if cross.dot(&p0) > 0.0 { -1.0 } else { 1.0 };
    Some(DepthNormal {
        normal: cross * (sign / len),
        cross,
        sign,
        v_right,
        v_down,
        rays: [k0, k1, k2],
    })
}
