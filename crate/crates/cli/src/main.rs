use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fgo_core::optim::{load_checkpoint, CheckpointError};
use fgo_core::render::render;
use fgo_core::surface::{extract_mesh, save_ply, ExtractionConfig, ExtractionError, PlyError, PlyFormat};
use fgo_core::tracking::trajectory::{load_tum, StampedPose, TrajectoryError};
use fgo_pipeline::config::{ConfigError, Mode, RunConfig};
use fgo_pipeline::dataset::{save_color, DatasetError};
use fgo_pipeline::metrics::{ate_rmse, Alignment, MetricsError};
use fgo_pipeline::run::{run_pipeline, DataSource, RunError};
use thiserror::Error;

#[derive(Parser)]
#[command(name = "fgo", version, about = "Gaussian opacity-field SLAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track, map and extract a mesh from a dataset or synthetic scene.
    Run {
        /// Dataset directory (TUM or Replica layout) or `synthetic:SHAPE[:key=value,...]`.
        #[arg(long)]
        data: String,
        /// Overrides the mode in the config file.
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract a surface mesh from a map checkpoint.
    ExtractMesh {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        /// Bisection steps per vertex.
        #[arg(long, default_value_t = 8)]
        iterations: usize,
        #[arg(long)]
        ascii: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Absolute trajectory error between two TUM trajectories.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Align with a similarity (monocular) instead of a rigid transform.
        #[arg(long)]
        similarity: bool,
        /// Timestamp association tolerance, seconds.
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
    },
    /// Render a checkpoint from one of its keyframe views or a TUM pose file.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Keyframe index, or a TUM trajectory file whose first pose is used.
        #[arg(long)]
        pose: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error("{path}: {source}")]
    Trajectory {
        path: PathBuf,
        #[source]
        source: TrajectoryError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Image(#[from] DatasetError),
}

impl CliError {
    fn class(&self) -> &'static str {
        match self {
            Self::Run(e) => e.class(),
            Self::Config(_) => "config-error",
            Self::Usage(_) => "usage-error",
            Self::Checkpoint(_) => "checkpoint-error",
            Self::Extraction(_) => "extraction-error",
            Self::Ply(_) => "io-error",
            Self::Trajectory { .. } => "trajectory-error",
            Self::Metrics(_) => "evaluation-error",
            Self::Image(_) => "io-error",
        }
    }
}

fn load_trajectory(path: &Path) -> Result<Vec<StampedPose>, CliError> {
    load_tum(path).map_err(|source| CliError::Trajectory {
        path: path.to_path_buf(),
        source,
    })
}

/// Pairs each estimated pose with the nearest ground-truth pose in time.
fn associate(est: &[StampedPose], gt: &[StampedPose], tolerance: f64) -> Vec<(StampedPose, StampedPose)> {
    est.iter()
        .filter_map(|e| {
            gt.iter()
                .min_by(|a, b| (a.timestamp - e.timestamp).abs().total_cmp(&(b.timestamp - e.timestamp).abs()))
                .filter(|g| (g.timestamp - e.timestamp).abs() <= tolerance)
                .map(|g| (*e, *g))
        })
        .collect()
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { data, mode, config, out } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let source: DataSource = data.parse().map_err(CliError::Usage)?;
            let result = run_pipeline(&source, &cfg, &out)?;
            let m = &result.metrics;
            let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
            println!("frames {} keyframes {} gaussians {}", m.n_frames, m.n_keyframes, m.n_gaussians);
            println!("ate_rmse_m {}", show(m.ate_rmse_m));
            if !m.loop_closures.is_empty() {
                println!("ate_before_loop_m {}", show(m.ate_before_loop_m));
            }
            println!("psnr_db {}", show(m.psnr_db));
            println!("ssim {}", show(m.ssim));
            println!("depth_l1_m {}", show(m.depth_l1_m));
            println!("mesh {} vertices {} triangles", m.mesh_vertices, m.mesh_triangles);
            println!("outputs in {}", out.display());
        }
        Command::ExtractMesh {
            checkpoint,
            tau,
            iterations,
            ascii,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let cfg = ExtractionConfig {
                tau,
                iterations,
                ..ExtractionConfig::default()
            };
            let ex = extract_mesh(&ckpt.map, &ckpt.views, &cfg)?;
            let format = if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
            save_ply(&out, &ex.mesh, format)?;
            println!(
                "{} vertices {} triangles ({} unbracketed)",
                ex.mesh.vertices.len(),
                ex.mesh.triangles.len(),
                ex.bracket_violations.len()
            );
        }
        Command::Eval {
            est,
            gt,
            similarity,
            tolerance,
        } => {
            let est = load_trajectory(&est)?;
            let gt = load_trajectory(&gt)?;
            let pairs = associate(&est, &gt, tolerance);
            if pairs.is_empty() {
                return Err(CliError::Usage(format!("no poses associated within {tolerance} s")));
            }
            let e: Vec<_> = pairs.iter().map(|(e, _)| e.to_pose()).collect();
            let g: Vec<_> = pairs.iter().map(|(_, g)| g.to_pose()).collect();
            let alignment = if similarity { Alignment::Similarity } else { Alignment::Rigid };
            let ate = ate_rmse(&e, &g, alignment)?;
            println!("pairs {}", pairs.len());
            println!("ate_rmse_m {ate}");
        }
        Command::Render { checkpoint, pose, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let first = ckpt
                .views
                .first()
                .ok_or_else(|| CliError::Usage("checkpoint has no views".into()))?;
            let view = match pose.parse::<usize>() {
                Ok(i) => *ckpt
                    .views
                    .get(i)
                    .ok_or_else(|| CliError::Usage(format!("view {i} out of range (0..{})", ckpt.views.len())))?,
                Err(_) => {
                    let traj = load_trajectory(Path::new(&pose))?;
                    let p = traj.first().ok_or_else(|| CliError::Usage(format!("{pose} holds no pose")))?;
                    fgo_core::opacity::View {
                        pose: p.to_pose(),
                        camera: first.camera,
                    }
                }
            };
            let frame = render(&view.camera, &view.pose, &ckpt.map);
            save_color(&out, &frame.color)?;
            println!("{}×{} written to {}", view.camera.width, view.camera.height, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::FAILURE
        }
    }
}
