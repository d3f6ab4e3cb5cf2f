//! Map optimization: losses, gradients, Adam, seeding and map maintenance.

mod adam;
mod checkpoint;
mod config;
pub mod gradcheck;
mod loss;
mod maintenance;
mod optimizer;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError};
pub use config::OptimizerConfig;
pub use loss::{
    color_loss, depth_distortion_loss, loss_and_gradient, normal_consistency_loss, total_loss, LossBreakdown,
    LossError, LossWeights,
};
pub use maintenance::{densify_and_prune, seed_gaussians, split_gaussian, Densified, GradientStats};
pub use optimizer::{optimize_map, MapOptimizer, OptimizeError};
pub use params::{logit, sigmoid, GaussianGrad, GaussianParams, PARAM_DIM};
