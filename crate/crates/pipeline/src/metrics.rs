//! Trajectory and image metrics.

use fgo_core::geometry::{umeyama_align, RigidPose};
use fgo_core::image::{DepthMap, ImageRgb};
use fgo_core::surface::TriangleMesh;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reported instead of +∞ for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0}×{1} vs {2}×{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("no pixel has valid depth in both maps")]
    AllInvalidDepth,
    #[error("alignment failed: {0}")]
    Alignment(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    Rigid,
    Similarity,
}

/// RMS of camera-centre residuals after aligning `estimate` onto
/// `ground_truth` (poses are world-to-camera, paired by index).
pub fn ate_rmse(estimate: &[RigidPose], ground_truth: &[RigidPose], alignment: Alignment) -> Result<f64, MetricsError> {
    if estimate.len() != ground_truth.len() {
        return Err(MetricsError::LengthMismatch(estimate.len(), ground_truth.len()));
    }
    let est: Vec<Vector3<f64>> = estimate.iter().map(|p| p.camera_center()).collect();
    let gt: Vec<Vector3<f64>> = ground_truth.iter().map(|p| p.camera_center()).collect();
    ate_rmse_points(&est, &gt, alignment)
}

pub fn ate_rmse_points(est: &[Vector3<f64>], gt: &[Vector3<f64>], alignment: Alignment) -> Result<f64, MetricsError> {
    if est.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(est.len(), gt.len()));
    }
    if est.is_empty() {
        return Ok(0.0);
    }
    let aligned: Vec<Vector3<f64>> = if est.len() < 3 {
        // Too few poses to fix a rotation: remove the mean offset only.
        let shift = gt.iter().sum::<Vector3<f64>>() / gt.len() as f64 - est.iter().sum::<Vector3<f64>>() / est.len() as f64;
        est.iter().map(|p| p + shift).collect()
    } else {
        match umeyama_align(est, gt, alignment == Alignment::Similarity) {
            Ok(t) => est.iter().map(|p| t.apply(p)).collect(),
            // Collinear trajectories: fall back to a translation-only fit.
            Err(_) => {
                let shift =
                    gt.iter().sum::<Vector3<f64>>() / gt.len() as f64 - est.iter().sum::<Vector3<f64>>() / est.len() as f64;
                est.iter().map(|p| p + shift).collect()
            }
        }
    };
    let sq: f64 = aligned.iter().zip(gt).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok((sq / est.len() as f64).sqrt())
}

fn check_shape(a: &ImageRgb, b: &ImageRgb) -> Result<(), MetricsError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(MetricsError::ShapeMismatch(a.width, a.height, b.width, b.height))
    }
}

/// `10·log10(1/MSE)` for images in [0, 1], capped at [`PSNR_CAP_DB`].
pub fn psnr(rendered: &ImageRgb, target: &ImageRgb) -> Result<f64, MetricsError> {
    check_shape(rendered, target)?;
    let n = (rendered.data.len() * 3).max(1) as f64;
    let mse: f64 = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b).norm_squared())
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

pub fn ssim(rendered: &ImageRgb, target: &ImageRgb) -> Result<f64, MetricsError> {
    check_shape(rendered, target)?;
    Ok(fgo_core::ssim::ssim(rendered, target))
}

/// Mean absolute depth difference over pixels valid (> 0) in both maps.
pub fn depth_l1(rendered: &DepthMap, target: &DepthMap) -> Result<f64, MetricsError> {
    if rendered.width != target.width || rendered.height != target.height {
        return Err(MetricsError::ShapeMismatch(rendered.width, rendered.height, target.width, target.height));
    }
    let (sum, n) = rendered
        .data
        .iter()
        .zip(&target.data)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .fold((0.0, 0usize), |(s, n), (a, b)| (s + (a - b).abs(), n + 1));
    if n == 0 {
        return Err(MetricsError::AllInvalidDepth);
    }
    Ok(sum / n as f64)
}

/// Distance from `p` to the triangle `abc`.
pub fn point_triangle_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> f64 {
    // Closest-point regions as in Ericson, Real-Time Collision Detection 5.1.5.
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (p - (a + ab * v)).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (p - (a + ac * w)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm()
}

/// Distance from `p` to the nearest triangle of `mesh`.
pub fn point_mesh_distance(p: &Vector3<f64>, mesh: &TriangleMesh) -> f64 {
    mesh.triangles
        .iter()
        .map(|t| point_triangle_distance(p, &mesh.vertices[t[0]], &mesh.vertices[t[1]], &mesh.vertices[t[2]]))
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric RMS surface deviation: vertices of each mesh against the other.
pub fn mesh_rms_deviation(mesh: &TriangleMesh, reference: &TriangleMesh) -> f64 {
    use rayon::prelude::*;
    if mesh.triangles.is_empty() || reference.triangles.is_empty() {
        return f64::INFINITY;
    }
    let one_way = |from: &TriangleMesh, to: &TriangleMesh| -> (f64, usize) {
        let s: f64 = from.vertices.par_iter().map(|v| point_mesh_distance(v, to).powi(2)).sum();
        (s, from.vertices.len())
    };
    let (a, na) = one_way(mesh, reference);
    let (b, nb) = one_way(reference, mesh);
    ((a + b) / (na + nb) as f64).sqrt()
}
