use serde::{Deserialize, Serialize};

/// Map optimization settings. Learning rates are per parameter group; the
/// mean rate is multiplied by `scene_extent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Weight of the depth-distortion term.
    pub alpha: f64,
    /// Weight of the depth-normal consistency term.
    pub beta: f64,
    /// D-SSIM share of the colour loss.
    pub lambda_dssim: f64,
    pub lr_mean: f64,
    pub lr_rotation: f64,
    pub lr_log_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub iterations_per_keyframe: usize,
    /// Most recent keyframes in the per-step sampling window.
    pub window_recent: usize,
    /// Extra randomly chosen older keyframes in the window.
    pub window_random: usize,
    pub densify: bool,
    pub densify_interval: usize,
    pub densify_grad_threshold: f64,
    pub prune_opacity: f64,
    /// Gaussians larger than this fraction of the extent split instead of clone.
    pub percent_dense: f64,
    pub max_gaussians: usize,
    pub scene_extent: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            alpha: 1000.0,
            beta: 0.05,
            lambda_dssim: 0.2,
            lr_mean: 1.6e-4,
            lr_rotation: 1e-3,
            lr_log_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-15,
            iterations_per_keyframe: 100,
            window_recent: 8,
            window_random: 2,
            densify: true,
            densify_interval: 100,
            densify_grad_threshold: 2e-4,
            prune_opacity: 0.005,
            percent_dense: 0.01,
            max_gaussians: 100_000,
            scene_extent: 1.0,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    /// Colour loss only (the ablation baseline).
    pub fn color_only(mut self) -> Self {
        self.alpha = 0.0;
        self.beta = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(format!("{name} must be finite and non-negative, got {v}"))
            }
        };
        finite_nonneg("alpha", self.alpha)?;
        finite_nonneg("beta", self.beta)?;
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return Err(format!("lambda_dssim must be in [0, 1], got {}", self.lambda_dssim));
        }
        for (n, v) in [
            ("lr_mean", self.lr_mean),
            ("lr_rotation", self.lr_rotation),
            ("lr_log_scale", self.lr_log_scale),
            ("lr_opacity", self.lr_opacity),
            ("lr_color", self.lr_color),
        ] {
            finite_nonneg(n, v)?;
        }
        if !(self.scene_extent > 0.0) {
            return Err("scene_extent must be positive".into());
        }
        Ok(())
    }
}
