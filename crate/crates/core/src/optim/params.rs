//! Unconstrained parameterization of a Gaussian and the matching gradient.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::geometry::GaussianPrimitive;

const OPACITY_CLAMP: f64 = 1e-6;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
    (p / (1.0 - p)).ln()
}

/// Optimizer-side view of a Gaussian: free quaternion, log-scales and
/// logit-opacity; colour is kept raw and clamped after each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams {
    pub mean: Vector3<f64>,
    /// Not necessarily unit; normalized when converted.
    pub rotation: Quaternion<f64>,
    pub log_scale: Vector3<f64>,
    pub logit_opacity: f64,
    pub color: Vector3<f64>,
}

/// Number of scalar parameters per Gaussian.
pub const PARAM_DIM: usize = 14;

impl GaussianParams {
    pub fn from_primitive(g: &GaussianPrimitive) -> Self {
        Self {
            mean: g.mean,
            rotation: *g.rotation.quaternion(),
            log_scale: g.scale.map(f64::ln),
            logit_opacity: logit(g.opacity),
            color: g.color,
        }
    }

    pub fn to_primitive(&self) -> GaussianPrimitive {
        GaussianPrimitive {
            mean: self.mean,
            rotation: UnitQuaternion::new_normalize(self.rotation),
            scale: self.log_scale.map(f64::exp),
            opacity: sigmoid(self.logit_opacity),
            color: self.color,
        }
    }

    /// Flat layout: mean(3), quaternion w,x,y,z (4), log-scale (3), logit (1), colour (3).
    pub fn to_array(&self) -> [f64; PARAM_DIM] {
        let q = &self.rotation;
        [
            self.mean.x,
            self.mean.y,
            self.mean.z,
            q.w,
            q.i,
            q.j,
            q.k,
            self.log_scale.x,
            self.log_scale.y,
            self.log_scale.z,
            self.logit_opacity,
            self.color.x,
            self.color.y,
            self.color.z,
        ]
    }

    pub fn from_array(a: &[f64; PARAM_DIM]) -> Self {
        Self {
            mean: Vector3::new(a[0], a[1], a[2]),
            rotation: Quaternion::new(a[3], a[4], a[5], a[6]),
            log_scale: Vector3::new(a[7], a[8], a[9]),
            logit_opacity: a[10],
            color: Vector3::new(a[11], a[12], a[13]),
        }
    }
}

/// Gradient with respect to [`GaussianParams`], same flat layout.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GaussianGrad {
    pub mean: Vector3<f64>,
    /// Components ordered like the parameter quaternion (w, i, j, k).
    pub rotation: Quaternion<f64>,
    pub log_scale: Vector3<f64>,
    pub logit_opacity: f64,
    pub color: Vector3<f64>,
}

impl GaussianGrad {
    pub fn zero() -> Self {
        Self {
            rotation: Quaternion::new(0.0, 0.0, 0.0, 0.0),
            ..Default::default()
        }
    }

    pub fn to_array(&self) -> [f64; PARAM_DIM] {
        let q = &self.rotation;
        [
            self.mean.x,
            self.mean.y,
            self.mean.z,
            q.w,
            q.i,
            q.j,
            q.k,
            self.log_scale.x,
            self.log_scale.y,
            self.log_scale.z,
            self.logit_opacity,
            self.color.x,
            self.color.y,
            self.color.z,
        ]
    }

    pub fn add_scaled(&mut self, other: &GaussianGrad, k: f64) {
        self.mean += other.mean * k;
        self.rotation += other.rotation * k;
        self.log_scale += other.log_scale * k;
        self.logit_opacity += other.logit_opacity * k;
        self.color += other.color * k;
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)` and its partial
/// derivatives with respect to each component.
pub(crate) fn rotation_and_partials(q: &Quaternion<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 4]) {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let r = Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    );
    let dw = Matrix3::new(
        0.0, -2.0 * z, 2.0 * y,
        2.0 * z, 0.0, -2.0 * x,
        -2.0 * y, 2.0 * x, 0.0,
    );
    let dx = Matrix3::new(
        0.0, 2.0 * y, 2.0 * z,
        2.0 * y, -4.0 * x, -2.0 * w,
        2.0 * z, 2.0 * w, -4.0 * x,
    );
    let dy = Matrix3::new(
        -4.0 * y, 2.0 * x, 2.0 * w,
        2.0 * x, 0.0, 2.0 * z,
        -2.0 * w, 2.0 * z, -4.0 * y,
    );
    let dz = Matrix3::new(
        -4.0 * z, -2.0 * w, 2.0 * x,
        2.0 * w, -4.0 * z, 2.0 * y,
        2.0 * x, 2.0 * y, 0.0,
    );
    (r, [dw, dx, dy, dz])
}

/// Converts the accumulated gradient with respect to the precision matrix
/// `Σ⁻¹ = R·diag(e^{-2·ls})·Rᵀ` into gradients for the raw quaternion and the
/// log-scales.
pub(crate) fn precision_grad_to_params(
    params: &GaussianParams,
    g_precision: &Matrix3<f64>,
) -> (Quaternion<f64>, Vector3<f64>) {
    let g_sym = (g_precision + g_precision.transpose()) * 0.5;
    let norm = params.rotation.norm();
    let q_hat = params.rotation / norm;
    let (r, partials) = rotation_and_partials(&q_hat);
    let d = params.log_scale.map(|ls| (-2.0 * ls).exp());
    let dmat = Matrix3::from_diagonal(&d);
    let g_r = 2.0 * g_sym * r * dmat;
    let rgr = r.transpose() * g_sym * r;
    let g_ls = Vector3::new(
        -2.0 * d.x * rgr[(0, 0)],
        -2.0 * d.y * rgr[(1, 1)],
        -2.0 * d.z * rgr[(2, 2)],
    );
    let g_hat = Quaternion::new(
        g_r.component_mul(&partials[0]).sum(),
        g_r.component_mul(&partials[1]).sum(),
        g_r.component_mul(&partials[2]).sum(),
        g_r.component_mul(&partials[3]).sum(),
    );
    // Through q̂ = q / |q|.
    let dot = q_hat.coords.dot(&g_hat.coords);
    let g_q = Quaternion::from((g_hat.coords - q_hat.coords * dot) / norm);
    (g_q, g_ls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rotation_formula_matches_nalgebra() {
        let q = Quaternion::new(0.3, -0.5, 0.7, 0.2);
        let unit = UnitQuaternion::new_normalize(q);
        let (r, _) = rotation_and_partials(unit.quaternion());
        assert_relative_eq!(r, unit.to_rotation_matrix().into_inner(), epsilon = 1e-14);
    }

    #[test]
    fn partials_match_finite_differences() {
        let q = Quaternion::new(0.3, -0.5, 0.7, 0.2);
        let (_, parts) = rotation_and_partials(&q);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q.coords;
            let mut qm = q.coords;
            // coords order is (i, j, k, w)
            let idx = [3, 0, 1, 2][k];
            qp[idx] += h;
            qm[idx] -= h;
            let (rp, _) = rotation_and_partials(&Quaternion::from(qp));
            let (rm, _) = rotation_and_partials(&Quaternion::from(qm));
            assert_relative_eq!((rp - rm) / (2.0 * h), parts[k], epsilon = 1e-8);
        }
    }

    #[test]
    fn round_trip_through_parameters() {
        let g = GaussianPrimitive {
            mean: Vector3::new(1.0, 2.0, 3.0),
            rotation: UnitQuaternion::from_scaled_axis(Vector3::new(0.1, 0.2, 0.3)),
            scale: Vector3::new(0.1, 0.2, 0.3),
            opacity: 0.4,
            color: Vector3::new(0.1, 0.5, 0.9),
        };
        let back = GaussianParams::from_primitive(&g).to_primitive();
        assert_relative_eq!(back.scale, g.scale, epsilon = 1e-15);
        assert_relative_eq!(back.opacity, g.opacity, epsilon = 1e-15);
        assert!(back.rotation.angle_to(&g.rotation) < 1e-12);
        let p = GaussianParams::from_primitive(&g);
        assert_eq!(GaussianParams::from_array(&p.to_array()), p);
    }
}
