//! Ray-Gaussian 1D evaluation, front-to-back compositing, mixing weights and
//! the view-minimum point opacity field.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{ray_hits_aabb, GaussianPrimitive, PinholeCamera, Ray, RigidPose, MIN_DEPTH};

/// Contributions with `δ·G_max` below this are dropped from a ray.
pub const CONTRIBUTION_CUTOFF: f64 = 1.0 / 255.0;
/// Half-extent, in standard deviations, of the per-Gaussian rejection box.
pub const AABB_SIGMA: f64 = 3.0;
/// Peaks closer to the ray origin than this are ignored.
pub const NEAR_PLANE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpacityError {
    #[error("degenerate-ray: |r_g| = {0}")]
    DegenerateRay(f64),
    #[error("no-visible-view: point is behind every camera")]
    NoVisibleView,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayContribution {
    pub gaussian_id: usize,
    /// Ray parameter of the peak response (metres along the ray).
    pub d_star: f64,
    pub g_max: f64,
    /// Mixing weight ω.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySample {
    pub ray: Ray,
    /// Sorted by `(d_star, gaussian_id)`.
    pub contributions: Vec<RayContribution>,
}

/// A keyframe view used for opacity evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    pub pose: RigidPose,
    pub camera: PinholeCamera,
}

/// `exp(-½ |o_g + d·r_g|²)`.
pub fn eval_1d(g: &GaussianPrimitive, ray: &Ray, d: f64) -> f64 {
    let (o, r) = g.to_local(ray);
    let x = o + r * d;
    (-0.5 * x.norm_squared()).exp()
}

/// Analytic maximiser `d* = -(o_gᵀ r_g)/(r_gᵀ r_g)` and the peak value.
pub fn max_contribution(g: &GaussianPrimitive, ray: &Ray) -> Result<(f64, f64), OpacityError> {
    let (o, r) = g.to_local(ray);
    peak_from_local(&o, &r)
}

fn peak_from_local(o: &Vector3<f64>, r: &Vector3<f64>) -> Result<(f64, f64), OpacityError> {
    let rr = r.norm_squared();
    if rr.sqrt() <= 1e-12 {
        return Err(OpacityError::DegenerateRay(rr.sqrt()));
    }
    let d_star = -o.dot(r) / rr;
    let x = o + r * d_star;
    Ok((d_star, (-0.5 * x.norm_squared()).exp()))
}

/// `Σ_i α_i Π_{j<i}(1 - α_j)` for per-Gaussian alphas `α = δ·G` in depth order.
pub fn composite_from_alphas(alphas: impl IntoIterator<Item = f64>) -> f64 {
    let mut transmittance = 1.0;
    let mut acc = 0.0;
    for a in alphas {
        acc += a * transmittance;
        transmittance *= 1.0 - a;
    }
    acc.clamp(0.0, 1.0)
}

/// Mixing weights `ω_i = α_i Π_{j<i}(1 - α_j)` for alphas in depth order.
pub fn mixing_weights_from_alphas(alphas: &[f64]) -> Vec<f64> {
    let mut transmittance = 1.0;
    alphas
        .iter()
        .map(|&a| {
            let w = a * transmittance;
            transmittance *= 1.0 - a;
            w
        })
        .collect()
}

impl RaySample {
    /// Collects every Gaussian whose 3σ box the ray enters and whose peak
    /// `δ·G_max` clears the cutoff, sorts them by depth and fills the mixing
    /// weights.
    pub fn build(ray: Ray, map: &[GaussianPrimitive]) -> RaySample {
        let mut contributions = Vec::new();
        for (id, g) in map.iter().enumerate() {
            if let Some(c) = contribution(id, g, &ray) {
                contributions.push(c);
            }
        }
        contributions.sort_by(|a, b| {
            a.d_star
                .total_cmp(&b.d_star)
                .then(a.gaussian_id.cmp(&b.gaussian_id))
        });
        let alphas: Vec<f64> = contributions
            .iter()
            .map(|c| map[c.gaussian_id].opacity * c.g_max)
            .collect();
        for (c, w) in contributions.iter_mut().zip(mixing_weights_from_alphas(&alphas)) {
            c.weight = w;
        }
        RaySample { ray, contributions }
    }

    pub fn alpha(&self) -> f64 {
        self.contributions.iter().map(|c| c.weight).sum()
    }
}

fn contribution(id: usize, g: &GaussianPrimitive, ray: &Ray) -> Option<RayContribution> {
    let (lo, hi) = g.aabb(AABB_SIGMA);
    if !ray_hits_aabb(ray, &lo, &hi) {
        return None;
    }
    let (d_star, g_max) = max_contribution(g, ray).ok()?;
    if d_star <= NEAR_PLANE || g.opacity * g_max < CONTRIBUTION_CUTOFF {
        return None;
    }
    Some(RayContribution {
        gaussian_id: id,
        d_star,
        g_max,
        weight: 0.0,
    })
}

/// Opacity accumulated along the sample's ray up to depth `d`. Each Gaussian
/// responds with `G(d)` before its peak and stays at `G_max` past it.
pub fn composite_opacity(sample: &RaySample, map: &[GaussianPrimitive], d: f64) -> f64 {
    composite_from_alphas(sample.contributions.iter().map(|c| {
        let g = &map[c.gaussian_id];
        let response = if d < c.d_star {
            eval_1d(g, &sample.ray, d)
        } else {
            c.g_max
        };
        g.opacity * response
    }))
}

/// Mixing weights of a sorted sample given per-Gaussian opacities indexed by
/// Gaussian id.
pub fn mixing_weights(sample: &RaySample, deltas: &[f64]) -> Vec<f64> {
    let alphas: Vec<f64> = sample
        .contributions
        .iter()
        .map(|c| deltas[c.gaussian_id] * c.g_max)
        .collect();
    mixing_weights_from_alphas(&alphas)
}

/// Opacity seen by a single view at world point `p`, or `None` when `p` is
/// behind that camera.
pub fn view_opacity(p: &Vector3<f64>, view: &View, map: &[GaussianPrimitive]) -> Option<f64> {
    let pc = view.pose.transform_point(p);
    if pc.z <= MIN_DEPTH {
        return None;
    }
    let center = view.pose.camera_center();
    let offset = p - center;
    let dist = offset.norm();
    let sample = RaySample::build(Ray::new(center, offset), map);
    Some(composite_opacity(&sample, map, dist))
}

/// Minimum composited opacity at `p` over every view that has `p` in front
/// of its camera.
pub fn point_opacity(
    p: &Vector3<f64>,
    views: &[View],
    map: &[GaussianPrimitive],
) -> Result<f64, OpacityError> {
    views
        .iter()
        .filter_map(|v| view_opacity(p, v, map))
        .reduce(f64::min)
        .map(|o| o.clamp(0.0, 1.0))
        .ok_or(OpacityError::NoVisibleView)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_at(mean: Vector3<f64>, opacity: f64) -> GaussianPrimitive {
        GaussianPrimitive::isotropic(mean, 1.0, opacity, Vector3::zeros())
    }

    fn z_ray(x: f64) -> Ray {
        Ray::new(Vector3::new(x, 0.0, -2.0), Vector3::new(0.0, 0.0, 1.0))
    }

    #[test]
    fn eval_1d_examples() {
        let g = unit_at(Vector3::zeros(), 1.0);
        assert_relative_eq!(eval_1d(&g, &z_ray(0.0), 2.0), 1.0);
        assert_relative_eq!(eval_1d(&g, &z_ray(0.0), 1.0), (-0.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(eval_1d(&g, &z_ray(0.0), 0.0), (-2.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn max_contribution_examples() {
        let g = unit_at(Vector3::zeros(), 1.0);
        let (d, m) = max_contribution(&g, &z_ray(0.0)).unwrap();
        assert_relative_eq!(d, 2.0);
        assert_relative_eq!(m, 1.0);
        let (d, m) = max_contribution(&g, &z_ray(1.0)).unwrap();
        assert_relative_eq!(d, 2.0);
        assert_relative_eq!(m, (-0.5f64).exp(), epsilon = 1e-15);

        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::zeros(),
        };
        assert!(matches!(
            max_contribution(&g, &ray),
            Err(OpacityError::DegenerateRay(_))
        ));
    }

    fn random_gaussian(rng: &mut impl Rng) -> GaussianPrimitive {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        GaussianPrimitive {
            mean: Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(2.0..4.0),
            ),
            rotation: UnitQuaternion::from_scaled_axis(axis),
            scale: Vector3::new(
                rng.gen_range(0.1..1.0),
                rng.gen_range(0.1..1.0),
                rng.gen_range(0.1..1.0),
            ),
            opacity: rng.gen_range(0.05..1.0),
            color: Vector3::zeros(),
        }
    }

    #[test]
    fn analytic_peak_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let g = random_gaussian(&mut rng);
            let ray = Ray::new(
                Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0),
                Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 1.0),
            );
            let step = 1e-4;
            let (mut best_d, mut best_v) = (0.0, f64::MIN);
            for i in 0..=100_000 {
                let d = i as f64 * step;
                let v = eval_1d(&g, &ray, d);
                if v > best_v {
                    best_v = v;
                    best_d = d;
                }
            }
            let (d_star, g_max) = max_contribution(&g, &ray).unwrap();
            if best_d > step && best_d < 10.0 - step {
                assert!((d_star - best_d).abs() <= step, "{d_star} vs {best_d}");
            }
            assert!(g_max >= best_v - 1e-15);
        }
    }

    #[test]
    fn composite_examples() {
        assert_relative_eq!(composite_from_alphas([0.8 * 1.0]), 0.8);
        assert_relative_eq!(composite_from_alphas([0.5, 0.5]), 0.75);
        assert_eq!(composite_from_alphas(std::iter::empty()), 0.0);

        // Same cases through RaySample: Gaussians placed so the ray hits their peaks.
        let map = vec![unit_at(Vector3::new(0.0, 0.0, 1.0), 0.8)];
        let sample = RaySample::build(z_ray(0.0), &map);
        assert_relative_eq!(composite_opacity(&sample, &map, 3.0), 0.8, epsilon = 1e-12);
        let empty = RaySample::build(z_ray(0.0), &[]);
        assert_eq!(composite_opacity(&empty, &[], 3.0), 0.0);
    }

    #[test]
    fn mixing_weight_examples() {
        assert_eq!(mixing_weights_from_alphas(&[1.0]), vec![1.0]);
        assert_eq!(mixing_weights_from_alphas(&[0.5, 0.5]), vec![0.5, 0.25]);
    }

    #[test]
    fn mixing_weights_telescope() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let alphas: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..1.0)).collect();
            let w = mixing_weights_from_alphas(&alphas);
            let residual: f64 = alphas.iter().map(|a| 1.0 - a).product();
            assert!((w.iter().sum::<f64>() + residual - 1.0).abs() < 1e-9);
            assert!(w.iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn sample_is_sorted_with_id_tiebreak() {
        let map = vec![
            unit_at(Vector3::new(0.0, 0.0, 2.0), 0.5),
            unit_at(Vector3::new(0.0, 0.0, 0.0), 0.5),
            unit_at(Vector3::new(0.0, 0.0, 0.0), 0.5),
        ];
        let s = RaySample::build(z_ray(0.0), &map);
        let ids: Vec<usize> = s.contributions.iter().map(|c| c.gaussian_id).collect();
        assert_eq!(ids, vec![1, 2, 0]);
        assert_relative_eq!(s.contributions[0].weight, 0.5);
        assert_relative_eq!(s.contributions[1].weight, 0.25);
        let deltas: Vec<f64> = map.iter().map(|g| g.opacity).collect();
        let w = mixing_weights(&s, &deltas);
        for (c, w) in s.contributions.iter().zip(w) {
            assert_eq!(c.weight, w);
        }
    }

    #[test]
    fn cutoff_drops_faint_gaussians() {
        let map = vec![unit_at(Vector3::zeros(), 0.003)];
        assert!(RaySample::build(z_ray(0.0), &map).contributions.is_empty());
    }

    fn six_views(radius: f64) -> Vec<View> {
        let camera = PinholeCamera::new(50.0, 50.0, 32.0, 32.0, 64, 64).unwrap();
        let dirs: [Vector3<f64>; 6] = [
            Vector3::x(),
            -Vector3::x(),
            Vector3::y(),
            -Vector3::y(),
            Vector3::z(),
            -Vector3::z(),
        ];
        dirs.iter()
            .map(|d| {
                let up = if d.y.abs() > 0.5 { Vector3::z() } else { Vector3::y() };
                View {
                    pose: RigidPose::look_at(d * radius, Vector3::zeros(), up),
                    camera,
                }
            })
            .collect()
    }

    #[test]
    fn point_opacity_far_point_is_transparent() {
        let map = vec![unit_at(Vector3::zeros(), 0.95)];
        let views = six_views(5.0);
        // Far from the Gaussian and not behind it for the +z view.
        let p = Vector3::new(1.0, 0.0, 4.5);
        let o = point_opacity(&p, &views[4..5], &map).unwrap();
        assert!(o < 1e-4, "{o}");
    }

    #[test]
    fn point_opacity_single_view_equals_composite() {
        let map = vec![unit_at(Vector3::new(0.1, 0.0, 0.0), 0.7)];
        let views = six_views(5.0);
        let p = Vector3::new(0.3, 0.2, 0.4);
        let v = &views[4];
        let c = v.pose.camera_center();
        let sample = RaySample::build(Ray::new(c, p - c), &map);
        let direct = composite_opacity(&sample, &map, (p - c).norm());
        assert_relative_eq!(point_opacity(&p, &views[4..5], &map).unwrap(), direct, epsilon = 1e-15);
    }

    #[test]
    fn point_opacity_matches_direct_reevaluation() {
        let map = vec![unit_at(Vector3::zeros(), 0.95)];
        let views = six_views(5.0);
        let p = Vector3::new(0.5, 0.0, 0.0);
        // Brute force: for each camera, march the ray in fine steps and take
        // the running maximum of the 1D response up to the point.
        let mut expected = f64::INFINITY;
        for v in &views {
            let c = v.pose.camera_center();
            if v.pose.transform_point(&p).z <= 0.0 {
                continue;
            }
            let dir = (p - c).normalize();
            let dist = (p - c).norm();
            let g = &map[0];
            let mut running: f64 = 0.0;
            let n = 200_000;
            for i in 0..=n {
                let d = dist * i as f64 / n as f64;
                running = running.max(g.density(&(c + dir * d)));
            }
            expected = expected.min(g.opacity * running);
        }
        let got = point_opacity(&p, &views, &map).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert_relative_eq!(got, 0.95 * (-0.125f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn point_behind_every_camera() {
        let map = vec![unit_at(Vector3::zeros(), 0.95)];
        let views = six_views(5.0);
        let p = Vector3::new(0.0, 0.0, 7.0);
        assert_eq!(
            point_opacity(&p, &views[4..5], &map),
            Err(OpacityError::NoVisibleView)
        );
    }

    proptest! {
        #[test]
        fn peak_depth_scales_inversely_with_direction_norm(k in 0.1f64..10.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_gaussian(&mut rng);
            let ray = Ray::new(Vector3::new(0.2, -0.1, 0.0), Vector3::new(0.1, 0.05, 1.0));
            let scaled = Ray { origin: ray.origin, direction: ray.direction * k };
            let (d0, g0) = max_contribution(&g, &ray).unwrap();
            let (d1, g1) = max_contribution(&g, &scaled).unwrap();
            prop_assert!((d1 - d0 / k).abs() < 1e-9 * (1.0 + d0.abs()));
            prop_assert!((g1 - g0).abs() < 1e-12);
        }

        #[test]
        fn composite_is_bounded(alphas in proptest::collection::vec(0.0f64..=1.0, 0..20)) {
            let c = composite_from_alphas(alphas.iter().copied());
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }
}
