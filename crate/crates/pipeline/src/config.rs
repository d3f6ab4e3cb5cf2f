//! Run configuration, read from a TOML file with one table per stage.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use fgo_core::optim::OptimizerConfig;
use fgo_core::surface::ExtractionConfig;
use fgo_core::tracking::{BaConfig, LoopConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Mono,
    #[default]
    Rgbd,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mono" => Ok(Self::Mono),
            "rgbd" => Ok(Self::Rgbd),
            _ => Err(format!("unknown mode '{s}' (mono, rgbd)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mono => "mono",
            Self::Rgbd => "rgbd",
        })
    }
}

/// Odometric drift added by the synthetic front-end, per processed frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    /// World-frame translation, metres.
    pub translation: [f64; 3],
    /// Rotation about the world y axis, radians.
    pub yaw: f64,
    /// Relative scale change (mono); 0 keeps the scale.
    pub scale: f64,
}

impl DriftConfig {
    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    /// New keyframe when the share of the last keyframe's points still
    /// tracked drops below this.
    pub keyframe_overlap: f64,
    /// New keyframe when the camera moved more than this fraction of the
    /// scene extent since the last keyframe.
    pub keyframe_translation: f64,
    /// Standard deviation of synthetic feature positions, pixels.
    pub pixel_noise: f64,
    /// Share of synthetic observations replaced by uniformly random pixels.
    pub outlier_ratio: f64,
    /// Frames a landmark may go unseen before its map point is dropped from
    /// the local map.
    pub track_window: usize,
    /// Standard deviation of synthetic depth measurements, metres.
    pub depth_sigma: f64,
    /// Minimum parallax for monocular triangulation, degrees.
    pub min_parallax_deg: f64,
    pub loops: LoopConfig,
    pub ba: BaConfig,
    pub drift: DriftConfig,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            keyframe_overlap: 0.9,
            keyframe_translation: 0.05,
            pixel_noise: 0.3,
            outlier_ratio: 0.0,
            track_window: 10,
            depth_sigma: 0.002,
            min_parallax_deg: 2.0,
            loops: LoopConfig {
                min_gap: 20,
                ..LoopConfig::default()
            },
            ba: BaConfig::default(),
            drift: DriftConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Processing resolution; inputs are resized when set.
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub seed: u64,
    /// Evaluate renders on every n-th frame.
    pub eval_stride: usize,
    /// Stop after this many frames.
    pub max_frames: Option<usize>,
    /// Overrides the scene extent derived from the data, metres.
    pub scene_extent: Option<f64>,
    /// Extra optimization iterations over all keyframes after the last frame.
    pub final_iterations: usize,
    pub optimizer: OptimizerConfig,
    pub tracking: TrackingConfig,
    pub extraction: ExtractionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Rgbd,
            width: None,
            height: None,
            seed: 0,
            eval_stride: 5,
            max_frames: None,
            scene_extent: None,
            final_iterations: 0,
            // The sparse-point seeding already covers the observed surface;
            // densification multiplies the per-frame mapping cost.
            optimizer: OptimizerConfig {
                densify: false,
                ..OptimizerConfig::default()
            },
            tracking: TrackingConfig::default(),
            extraction: ExtractionConfig::default(),
        }
    }
}

/// Fills keys missing from `table` with those of `defaults`, recursing into
/// tables present in both.
fn overlay(table: &mut toml::Table, defaults: toml::Table) {
    for (key, value) in defaults {
        match (table.get_mut(&key), value) {
            (None, value) => {
                table.insert(key, value);
            }
            (Some(toml::Value::Table(t)), toml::Value::Table(d)) => overlay(t, d),
            _ => {}
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    /// Parses a config; keys left out take the values of
    /// [`RunConfig::default`], including inside nested tables.
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(s)?;
        let defaults = toml::Table::try_from(Self::default()).expect("config is always serializable");
        overlay(&mut table, defaults);
        let cfg: RunConfig = table.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.width.is_some() != self.height.is_some() {
            return bad("width and height must be given together".into());
        }
        if matches!(self.width, Some(0)) || matches!(self.height, Some(0)) {
            return bad("resolution must be positive".into());
        }
        if self.eval_stride == 0 {
            return bad("eval_stride must be at least 1".into());
        }
        if let Some(e) = self.scene_extent {
            if !(e > 0.0 && e.is_finite()) {
                return bad(format!("scene_extent must be positive, got {e}"));
            }
        }
        let t = &self.tracking;
        if !(0.0..=1.0).contains(&t.keyframe_overlap) {
            return bad(format!("keyframe_overlap must be in [0, 1], got {}", t.keyframe_overlap));
        }
        if !(0.0..1.0).contains(&t.outlier_ratio) {
            return bad(format!("outlier_ratio must be in [0, 1), got {}", t.outlier_ratio));
        }
        for (name, v) in [
            ("keyframe_translation", t.keyframe_translation),
            ("pixel_noise", t.pixel_noise),
            ("depth_sigma", t.depth_sigma),
            ("min_parallax_deg", t.min_parallax_deg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(t.drift.scale > -1.0) {
            return bad("drift.scale must exceed -1".into());
        }
        if !(self.extraction.tau > 0.0 && self.extraction.tau < 1.0) {
            return bad(format!("extraction.tau must be in (0, 1), got {}", self.extraction.tau));
        }
        // scene_extent is filled in from the data at run time.
        let opt = OptimizerConfig {
            scene_extent: 1.0,
            ..self.optimizer.clone()
        };
        opt.validate().map_err(ConfigError::Invalid)
    }
}
