use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::adam::Adam;
use super::config::OptimizerConfig;
use super::loss::{loss_and_gradient, LossBreakdown, LossError, LossWeights};
use super::maintenance::{densify_and_prune, GradientStats};
use super::params::{GaussianParams, PARAM_DIM};
use crate::geometry::GaussianPrimitive;
use crate::tracking::Keyframe;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("diverged at iteration {iteration} (keyframe {keyframe_id}, {n_gaussians} gaussians): {breakdown:?}")]
    Divergence {
        iteration: u64,
        keyframe_id: usize,
        n_gaussians: usize,
        breakdown: LossBreakdown,
    },
}

/// Stateful Adam optimizer over a Gaussian map.
#[derive(Debug, Clone)]
pub struct MapOptimizer {
    config: OptimizerConfig,
    params: Vec<GaussianParams>,
    map: Vec<GaussianPrimitive>,
    adam: Adam,
    stats: GradientStats,
    rng: ChaCha8Rng,
    iteration: u64,
    history: Vec<LossBreakdown>,
}

impl MapOptimizer {
    pub fn new(map: Vec<GaussianPrimitive>, config: OptimizerConfig) -> Result<Self, OptimizeError> {
        config.validate().map_err(OptimizeError::InvalidConfig)?;
        let n = map.len();
        Ok(Self {
            params: map.iter().map(GaussianParams::from_primitive).collect(),
            map,
            adam: Adam::new(n, config.adam_beta1, config.adam_beta2, config.adam_eps),
            stats: GradientStats::new(n),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            iteration: 0,
            history: Vec::new(),
            config,
        })
    }

    pub fn map(&self) -> &[GaussianPrimitive] {
        &self.map
    }

    pub fn into_map(self) -> Vec<GaussianPrimitive> {
        self.map
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn history(&self) -> &[LossBreakdown] {
        &self.history
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights::new(self.config.alpha, self.config.beta, self.config.lambda_dssim)
    }

    /// Appends Gaussians with fresh optimizer state.
    pub fn add_gaussians(&mut self, new: &[GaussianPrimitive]) {
        let mut source: Vec<Option<usize>> = (0..self.map.len()).map(Some).collect();
        source.extend(std::iter::repeat(None).take(new.len()));
        self.map.extend_from_slice(new);
        self.params.extend(new.iter().map(GaussianParams::from_primitive));
        self.adam.remap(&source);
        self.stats.sum.extend(std::iter::repeat(0.0).take(new.len()));
        self.stats.count.extend(std::iter::repeat(0).take(new.len()));
    }

    /// Replaces the whole map (e.g. after a loop correction moved it),
    /// keeping per-Gaussian optimizer state when the count is unchanged.
    pub fn replace_map(&mut self, map: Vec<GaussianPrimitive>) {
        if map.len() != self.map.len() {
            let n = map.len();
            self.adam = Adam::new(n, self.config.adam_beta1, self.config.adam_beta2, self.config.adam_eps);
            self.stats = GradientStats::new(n);
        }
        self.params = map.iter().map(GaussianParams::from_primitive).collect();
        self.map = map;
    }

    fn learning_rates(&self) -> [f64; PARAM_DIM] {
        let c = &self.config;
        let m = c.lr_mean * c.scene_extent;
        [
            m,
            m,
            m,
            c.lr_rotation,
            c.lr_rotation,
            c.lr_rotation,
            c.lr_rotation,
            c.lr_log_scale,
            c.lr_log_scale,
            c.lr_log_scale,
            c.lr_opacity,
            c.lr_color,
            c.lr_color,
            c.lr_color,
        ]
    }

    /// One gradient step against a single keyframe.
    pub fn step(&mut self, kf: &Keyframe) -> Result<LossBreakdown, OptimizeError> {
        let (breakdown, grads) =
            loss_and_gradient(&self.params, &self.map, &kf.camera, &kf.pose, &kf.image, &self.weights())?;
        let finite_grads = grads.iter().all(|g| g.to_array().iter().all(|v| v.is_finite()));
        if !breakdown.total.is_finite() || !finite_grads {
            return Err(OptimizeError::Divergence {
                iteration: self.iteration,
                keyframe_id: kf.id,
                n_gaussians: self.map.len(),
                breakdown,
            });
        }
        let lr = self.learning_rates();
        let max_log_scale = self.config.scene_extent.ln();
        for (i, g) in grads.iter().enumerate() {
            let g_arr = g.to_array();
            if g_arr.iter().any(|v| *v != 0.0) {
                self.stats.sum[i] += g.mean.norm() * self.config.scene_extent;
                self.stats.count[i] += 1;
            }
            let before = self.params[i].to_array();
            let mut x = before;
            self.adam.step(i, &mut x, &g_arr, &lr);
            if x == before {
                continue;
            }
            let mut p = GaussianParams::from_array(&x);
            p.rotation = p.rotation.normalize();
            p.log_scale = p.log_scale.map(|v| v.min(max_log_scale));
            p.color = p.color.map(|v| v.clamp(0.0, 1.0));
            self.params[i] = p;
            self.map[i] = p.to_primitive();
        }
        self.iteration += 1;
        self.history.push(breakdown);
        if self.config.densify
            && self.config.densify_interval > 0
            && self.iteration % self.config.densify_interval as u64 == 0
        {
            self.maintain();
        }
        Ok(breakdown)
    }

    /// Densify/prune with the statistics gathered so far, then reset them.
    pub fn maintain(&mut self) {
        let out = densify_and_prune(&self.map, &self.stats, &self.config);
        self.params = out
            .source
            .iter()
            .zip(&out.map)
            .map(|(s, g)| match s {
                Some(i) => self.params[*i],
                None => GaussianParams::from_primitive(g),
            })
            .collect();
        self.adam.remap(&out.source);
        self.map = out.map;
        self.stats = GradientStats::new(self.map.len());
    }

    /// Runs `iterations` steps on keyframes drawn from the window ending at
    /// `keyframes[current]`: the most recent ones plus a few random older ones.
    pub fn optimize_window(
        &mut self,
        keyframes: &[Keyframe],
        current: usize,
        iterations: usize,
    ) -> Result<(), OptimizeError> {
        if keyframes.is_empty() {
            return Ok(());
        }
        let current = current.min(keyframes.len() - 1);
        let start = (current + 1).saturating_sub(self.config.window_recent.max(1));
        let mut window: Vec<usize> = (start..=current).collect();
        let mut older: Vec<usize> = (0..start).collect();
        older.shuffle(&mut self.rng);
        window.extend(older.into_iter().take(self.config.window_random));
        for _ in 0..iterations {
            let k = *window.choose(&mut self.rng).expect("non-empty window");
            self.step(&keyframes[k])?;
        }
        Ok(())
    }
}

/// Optimizes `map` against the keyframes in order, running the configured
/// number of iterations for each keyframe over its sliding window.
pub fn optimize_map(
    map: Vec<GaussianPrimitive>,
    keyframes: &[Keyframe],
    config: &OptimizerConfig,
) -> Result<(Vec<GaussianPrimitive>, Vec<LossBreakdown>), OptimizeError> {
    let mut opt = MapOptimizer::new(map, config.clone())?;
    for k in 0..keyframes.len() {
        opt.optimize_window(keyframes, k, config.iterations_per_keyframe)?;
    }
    let history = opt.history.clone();
    Ok((opt.into_map(), history))
}
