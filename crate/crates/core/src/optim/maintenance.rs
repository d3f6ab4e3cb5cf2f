//! Seeding Gaussians from sparse points, and densify/prune.

use nalgebra::Vector3;

use crate::geometry::GaussianPrimitive;
use crate::tracking::{Keyframe, MapPoint};

use super::config::OptimizerConfig;

pub const SEED_OPACITY: f64 = 0.1;
pub const MIN_SEED_SCALE: f64 = 1e-4;

/// One isotropic Gaussian per point. Scale is the mean distance to the three
/// nearest other points, clamped to `[1e-4, extent/10]`; colour is read from
/// the first observing keyframe.
pub fn seed_gaussians(points: &[MapPoint], keyframes: &[Keyframe], scene_extent: f64) -> Vec<GaussianPrimitive> {
    let max_scale = (scene_extent / 10.0).max(MIN_SEED_SCALE);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut nearest = [f64::INFINITY; 3];
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p.position - q.position).norm();
                if d < nearest[2] {
                    nearest[2] = d;
                    nearest.sort_by(|a, b| a.total_cmp(b));
                }
            }
            let found: Vec<f64> = nearest.iter().copied().filter(|d| d.is_finite()).collect();
            let scale = if found.is_empty() {
                MIN_SEED_SCALE
            } else {
                found.iter().sum::<f64>() / found.len() as f64
            };
            let color = p
                .observations
                .first()
                .and_then(|o| {
                    let kf = keyframes.iter().find(|k| k.id == o.keyframe_id)?;
                    let x = o.pixel.x.round();
                    let y = o.pixel.y.round();
                    if x < 0.0 || y < 0.0 || x as usize >= kf.image.width || y as usize >= kf.image.height {
                        return None;
                    }
                    Some(kf.image.get(x as usize, y as usize))
                })
                .unwrap_or_else(|| Vector3::repeat(0.5));
            GaussianPrimitive::isotropic(p.position, scale.clamp(MIN_SEED_SCALE, max_scale), SEED_OPACITY, color)
        })
        .collect()
}

/// Positional-gradient norms accumulated since the last maintenance pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientStats {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradientStats {
    pub fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

/// Result of [`densify_and_prune`]. `source[j]` is the input index that
/// output `j` is an unmodified copy of, or `None` for a new Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Densified {
    pub map: Vec<GaussianPrimitive>,
    pub source: Vec<Option<usize>>,
}

/// Halves the largest axis and places the two children ±1σ along it.
pub fn split_gaussian(g: &GaussianPrimitive) -> [GaussianPrimitive; 2] {
    let (axis, &s) = g
        .scale
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("three axes");
    let dir = g.rotation * Vector3::ith(axis, 1.0);
    let mut scale = g.scale;
    scale[axis] = s / 2.0;
    let child = |sign: f64| GaussianPrimitive {
        mean: g.mean + dir * (sign * s),
        scale,
        ..*g
    };
    [child(1.0), child(-1.0)]
}

/// Clones small and splits large Gaussians with a high mean positional
/// gradient, removes nearly transparent ones, and caps the map size.
pub fn densify_and_prune(map: &[GaussianPrimitive], stats: &GradientStats, config: &OptimizerConfig) -> Densified {
    let mut candidates: Vec<usize> = (0..map.len())
        .filter(|&i| map[i].opacity >= config.prune_opacity && stats.mean(i) > config.densify_grad_threshold)
        .collect();
    candidates.sort_by(|&a, &b| stats.mean(b).total_cmp(&stats.mean(a)).then(a.cmp(&b)));
    let survivors = map.iter().filter(|g| g.opacity >= config.prune_opacity).count();
    let mut budget = config.max_gaussians.saturating_sub(survivors);
    let mut action = vec![0u8; map.len()]; // 1 clone, 2 split
    for &i in &candidates {
        if budget == 0 {
            break;
        }
        let large = map[i].max_scale() > config.percent_dense * config.scene_extent;
        action[i] = if large { 2 } else { 1 };
        budget -= 1;
    }

    let mut out = Densified {
        map: Vec::with_capacity(map.len()),
        source: Vec::with_capacity(map.len()),
    };
    let mut extra = Vec::new();
    for (i, g) in map.iter().enumerate() {
        if g.opacity < config.prune_opacity {
            continue;
        }
        match action[i] {
            1 => {
                out.map.push(*g);
                out.source.push(Some(i));
                extra.push(*g);
            }
            2 => extra.extend(split_gaussian(g)),
            _ => {
                out.map.push(*g);
                out.source.push(Some(i));
            }
        }
    }
    out.source.extend(std::iter::repeat(None).take(extra.len()));
    out.map.extend(extra);
    out
}
