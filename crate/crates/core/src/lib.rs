//! Core of a Gaussian opacity-field SLAM system.

pub mod geometry;
pub mod image;
pub mod opacity;
pub mod render;
pub mod ssim;
pub mod optim;
pub mod tracking;
pub mod surface;
