//! Rigid and similarity transforms, the pinhole camera, rays and the
//! Gaussian primitive together with its whitened local frame.
//!
//! Poses follow the world-to-camera convention: a camera-frame point is
//! `R * P + t`. The camera centre is therefore `-Rᵀ t`.

use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

/// Camera-frame depth below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point-behind-camera: camera-frame z = {z}")]
    PointBehindCamera { z: f64 },
    #[error("degenerate-configuration: {0}")]
    Degenerate(String),
    #[error("invalid-camera: {0}")]
    InvalidCamera(String),
    #[error("invalid-gaussian: {0}")]
    InvalidGaussian(String),
}

/// Closed-form quaternion of an orthonormal matrix (stable at 180°).
pub fn rotation_from_matrix(m: &Matrix3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m))
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds the world-to-camera pose of a camera with orientation `r_wc`
    /// (camera axes expressed in world) located at `center`.
    pub fn from_camera_to_world(r_wc: UnitQuaternion<f64>, center: Vector3<f64>) -> Self {
        let rotation = r_wc.inverse();
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    /// World-to-camera pose of a camera at `eye` looking at `target`, with the
    /// image y axis pointing roughly along `-up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(&(-up));
        if x.norm() < 1e-12 {
            x = z.cross(&Vector3::new(1.0, 0.0, 0.0));
            if x.norm() < 1e-12 {
                x = z.cross(&Vector3::new(0.0, 1.0, 0.0));
            }
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r_wc = Matrix3::from_columns(&[x, y, z]);
        let rot = rotation_from_matrix(&r_wc);
        Self::from_camera_to_world(rot, eye)
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self::new(iso.rotation, iso.translation.vector)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rotation = self.rotation.inverse();
        RigidPose {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Left-multiplicative update `exp(ξ) ∘ self` with `ξ = (omega, v)`.
    pub fn retract(&self, omega: &Vector3<f64>, v: &Vector3<f64>) -> RigidPose {
        let dr = UnitQuaternion::from_scaled_axis(*omega);
        let mut rotation = dr * self.rotation;
        rotation.renormalize();
        RigidPose {
            rotation,
            translation: dr * self.translation + v,
        }
    }
}

/// `p ↦ s·R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        assert!(scale > 0.0, "similarity scale must be positive");
        Self {
            scale,
            rotation,
            translation,
        }
    }

    pub fn from_rigid(pose: &RigidPose) -> Self {
        Self::new(1.0, pose.rotation, pose.translation)
    }

    /// Drops the scale. Exact when `scale == 1`.
    pub fn to_rigid(&self) -> RigidPose {
        RigidPose::new(self.rotation, self.translation)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let rotation = self.rotation.inverse();
        let scale = 1.0 / self.scale;
        SimilarityTransform {
            scale,
            rotation,
            translation: -(scale * (rotation * self.translation)),
        }
    }

    /// Geodesic-style blend between the identity (`w = 0`) and `self` (`w = 1`).
    pub fn interpolate(&self, w: f64) -> SimilarityTransform {
        SimilarityTransform {
            scale: self.scale.powf(w),
            rotation: UnitQuaternion::identity().slerp(&self.rotation, w),
            translation: self.translation * w,
        }
    }

    /// Moves a world-to-camera pose by this world-frame similarity: the camera
    /// centre maps through `self`, the orientation is rotated, the scale is
    /// absorbed into the translation.
    pub fn transform_camera(&self, pose: &RigidPose) -> RigidPose {
        let center = self.apply(&pose.camera_center());
        let r_wc = self.rotation * pose.rotation.inverse();
        RigidPose::from_camera_to_world(r_wc, center)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeCamera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidCamera(format!(
                "cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidCamera(format!(
                "cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Same field of view at a different resolution.
    pub fn rescaled(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    pub fn project_camera_point(&self, pc: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if pc.z <= MIN_DEPTH {
            return Err(GeometryError::PointBehindCamera { z: pc.z });
        }
        Ok(Vector2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        ))
    }

    /// Camera-frame ray through pixel `(u, v)` scaled so that its z component is 1.
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Camera-frame point at z-depth `depth` behind pixel `(u, v)`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        self.unproject(u, v) * depth
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }
}

/// Pinhole projection of world point `p` seen from `pose`.
pub fn project(
    camera: &PinholeCamera,
    pose: &RigidPose,
    p: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    camera.project_camera_point(&pose.transform_point(p))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    /// Normalizes `direction`.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, d: f64) -> Vector3<f64> {
        self.origin + self.direction * d
    }

    /// World ray from the camera centre through pixel `(u, v)`.
    pub fn through_pixel(camera: &PinholeCamera, pose: &RigidPose, u: f64, v: f64) -> Self {
        let dir_cam = camera.unproject(u, v);
        let dir_world = pose.rotation.inverse() * dir_cam;
        Self::new(pose.camera_center(), dir_world)
    }
}

/// One anisotropic 3D Gaussian of the map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    /// Per-axis standard deviations in metres.
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl GaussianPrimitive {
    pub fn new(
        mean: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
        scale: Vector3<f64>,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let g = Self {
            mean,
            rotation,
            scale,
            opacity,
            color,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn isotropic(mean: Vector3<f64>, sigma: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            mean,
            rotation: UnitQuaternion::identity(),
            scale: Vector3::repeat(sigma),
            opacity,
            color,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(GeometryError::InvalidGaussian(format!(
                "scales must be positive, got {:?}",
                self.scale.as_slice()
            )));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(GeometryError::InvalidGaussian(format!(
                "opacity {} outside [0, 1]",
                self.opacity
            )));
        }
        if !self.mean.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::InvalidGaussian("non-finite mean".into()));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let d = Matrix3::from_diagonal(&self.scale.component_mul(&self.scale));
        r * d * r.transpose()
    }

    /// `Σ⁻¹ = R·diag(s)⁻²·Rᵀ`.
    pub fn precision(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let inv = self.scale.map(|s| 1.0 / (s * s));
        r * Matrix3::from_diagonal(&inv) * r.transpose()
    }

    /// Whitening map `x ↦ diag(s)⁻¹ Rᵀ x`.
    pub fn whitening(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        Matrix3::from_diagonal(&self.scale.map(|s| 1.0 / s)) * r.transpose()
    }

    /// Ray origin and direction in the Gaussian's whitened frame. The
    /// direction is not renormalized, so the ray parameter keeps its metric
    /// meaning along the world ray.
    pub fn to_local(&self, ray: &Ray) -> (Vector3<f64>, Vector3<f64>) {
        let w = self.whitening();
        (w * (ray.origin - self.mean), w * ray.direction)
    }

    /// Inverse of [`to_local`](Self::to_local).
    pub fn from_local(&self, o_g: &Vector3<f64>, r_g: &Vector3<f64>) -> Ray {
        let r = self.rotation_matrix();
        let origin = r * o_g.component_mul(&self.scale) + self.mean;
        let direction = r * r_g.component_mul(&self.scale);
        Ray { origin, direction }
    }

    /// Unnormalized density `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
    pub fn density(&self, x: &Vector3<f64>) -> f64 {
        let e = x - self.mean;
        (-0.5 * e.dot(&(self.precision() * e))).exp()
    }

    pub fn max_scale(&self) -> f64 {
        self.scale.max()
    }

    /// Corners of the oriented box spanning `±k·s` along each principal axis.
    pub fn box_corners(&self, k_sigma: f64) -> [Vector3<f64>; 8] {
        let r = self.rotation_matrix();
        let mut out = [Vector3::zeros(); 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let sign = Vector3::new(
                if i & 1 == 0 { -1.0 } else { 1.0 },
                if i & 2 == 0 { -1.0 } else { 1.0 },
                if i & 4 == 0 { -1.0 } else { 1.0 },
            );
            *corner = self.mean + r * (sign.component_mul(&self.scale) * k_sigma);
        }
        out
    }

    /// World axis-aligned bounds of the `k·σ` oriented box.
    pub fn aabb(&self, k_sigma: f64) -> (Vector3<f64>, Vector3<f64>) {
        let r = self.rotation_matrix();
        let half = r.abs() * self.scale * k_sigma;
        (self.mean - half, self.mean + half)
    }
}

/// Slab test of a ray against an axis-aligned box, restricted to `d ≥ 0`.
pub fn ray_hits_aabb(ray: &Ray, lo: &Vector3<f64>, hi: &Vector3<f64>) -> bool {
    let mut t0 = 0.0_f64;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        let o = ray.origin[k];
        let d = ray.direction[k];
        if d.abs() < 1e-300 {
            if o < lo[k] || o > hi[k] {
                return false;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut a, mut b) = ((lo[k] - o) * inv, (hi[k] - o) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t0 > t1 {
            return false;
        }
    }
    true
}

/// Least-squares similarity (or rigid motion) taking `source` onto `target`
/// (Umeyama's closed form).
pub fn umeyama_align(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    with_scale: bool,
) -> Result<SimilarityTransform, GeometryError> {
    if source.len() != target.len() {
        return Err(GeometryError::Degenerate(format!(
            "point count mismatch: {} vs {}",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(GeometryError::Degenerate(format!(
            "need at least 3 point pairs, got {}",
            source.len()
        )));
    }
    let n = source.len() as f64;
    let mu_s = source.iter().sum::<Vector3<f64>>() / n;
    let mu_t = target.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s - mu_s;
        let dt = t - mu_t;
        cov += dt * ds.transpose();
        src_cov += ds * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= n;
    src_cov /= n;
    var_s /= n;

    let src_sv = src_cov.symmetric_eigenvalues();
    let mut sv: Vec<f64> = src_sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if var_s <= 0.0 || sv[1] <= 1e-12 * sv[0].max(f64::MIN_POSITIVE) {
        return Err(GeometryError::Degenerate(
            "source points are collinear or coincident".into(),
        ));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let scale = if with_scale {
        let d = svd.singular_values;
        (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_s
    } else {
        1.0
    };
    let rotation = rotation_from_matrix(&r);
    let translation = mu_t - scale * (rotation * mu_s);
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}
