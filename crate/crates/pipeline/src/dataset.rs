//! Real-image datasets: TUM RGB-D list files and the preprocessed Replica
//! layout. Loading only resolves and checks paths; images are decoded on
//! demand so that monocular runs never touch depth files.

use std::fs;
use std::path::{Path, PathBuf};

use fgo_core::geometry::{PinholeCamera, RigidPose};
use fgo_core::image::{DepthMap, ImageRgb};
use fgo_core::tracking::trajectory::{read_tum, TrajectoryError};
use image::imageops::FilterType;
use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

pub const TUM_DEPTH_SCALE: f64 = 5000.0;
pub const REPLICA_DEPTH_SCALE: f64 = 6553.5;
pub const DEFAULT_ASSOCIATION_TOLERANCE: f64 = 0.02;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("no associated frames within {tolerance} s")]
    NoAssociations { tolerance: f64 },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("unrecognized dataset layout at {0} (expected rgb.txt or results/ + traj.txt)")]
    UnknownLayout(PathBuf),
    #[error("cannot decode {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("timestamps not strictly increasing at frame {0}")]
    Unordered(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub color: PathBuf,
    pub depth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub camera: PinholeCamera,
    /// World-to-camera, one per frame.
    pub ground_truth: Option<Vec<RigidPose>>,
    /// Raw depth units per metre.
    pub depth_scale: f64,
}

fn require(path: &Path) -> Result<(), DatasetError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(DatasetError::MissingFile(path.to_path_buf()))
    }
}

fn read_text(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|_| DatasetError::MissingFile(path.to_path_buf()))
}

/// `timestamp filename` rows, skipping blanks and `#` comments.
fn read_list(path: &Path) -> Result<Vec<(f64, String)>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in read_text(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse_err = |message: &str| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: message.to_string(),
        };
        let t: f64 = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| parse_err("bad timestamp"))?;
        let name = it.next().ok_or_else(|| parse_err("missing file name"))?;
        out.push((t, name.to_string()));
    }
    Ok(out)
}

/// Index of the entry nearest to `t` within `tol`, from rows sorted by time.
fn nearest(times: &[f64], t: f64, tol: f64) -> Option<usize> {
    let i = times.partition_point(|x| *x < t);
    [i.checked_sub(1), (i < times.len()).then_some(i)]
        .into_iter()
        .flatten()
        .filter(|&j| (times[j] - t).abs() <= tol)
        .min_by(|&a, &b| (times[a] - t).abs().total_cmp(&(times[b] - t).abs()))
}

/// Optional `camera.txt`: `fx fy cx cy [width height]`.
fn read_camera(root: &Path, default: PinholeCamera, first_image: &Path) -> Result<PinholeCamera, DatasetError> {
    let path = root.join("camera.txt");
    let mut cam = default;
    if path.is_file() {
        let vals: Vec<f64> = read_text(&path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .flat_map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DatasetError::Parse {
                path: path.clone(),
                line: 1,
                message: e.to_string(),
            })?;
        if vals.len() != 4 && vals.len() != 6 {
            return Err(DatasetError::Parse {
                path,
                line: 1,
                message: format!("expected 4 or 6 values, got {}", vals.len()),
            });
        }
        cam.fx = vals[0];
        cam.fy = vals[1];
        cam.cx = vals[2];
        cam.cy = vals[3];
        if vals.len() == 6 {
            cam.width = vals[4] as usize;
            cam.height = vals[5] as usize;
        }
    }
    if let Ok((w, h)) = image::image_dimensions(first_image) {
        if (w as usize, h as usize) != (cam.width, cam.height) {
            // Intrinsics are given for the stated size; follow the files.
            cam = cam.rescaled(w as usize, h as usize);
        }
    }
    cam.validate().map_err(|e| DatasetError::Camera(e.to_string()))?;
    Ok(cam)
}

fn check_order(frames: &[Frame]) -> Result<(), DatasetError> {
    match frames.windows(2).position(|w| w[1].timestamp <= w[0].timestamp) {
        Some(i) => Err(DatasetError::Unordered(i + 1)),
        None => Ok(()),
    }
}

/// TUM RGB-D directory: `rgb.txt` and optionally `depth.txt` and
/// `groundtruth.txt`. Colour rows are kept when every present list has an
/// entry within `tolerance` seconds.
pub fn load_tum_dataset(root: &Path, tolerance: f64) -> Result<Dataset, DatasetError> {
    let mut rgb = read_list(&root.join("rgb.txt"))?;
    rgb.sort_by(|a, b| a.0.total_cmp(&b.0));
    let depth_path = root.join("depth.txt");
    let mut depth = if depth_path.is_file() { Some(read_list(&depth_path)?) } else { None };
    if let Some(d) = depth.as_mut() {
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let gt_path = root.join("groundtruth.txt");
    let gt = if gt_path.is_file() {
        let text = read_text(&gt_path)?;
        let mut rows = read_tum(text.as_bytes()).map_err(|e| match e {
            TrajectoryError::Parse { line, message } => DatasetError::Parse {
                path: gt_path.clone(),
                line,
                message,
            },
            TrajectoryError::Io(_) => DatasetError::MissingFile(gt_path.clone()),
        })?;
        rows.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        Some(rows)
    } else {
        None
    };

    let depth_times: Vec<f64> = depth.iter().flatten().map(|r| r.0).collect();
    let gt_times: Vec<f64> = gt.iter().flatten().map(|r| r.timestamp).collect();
    let mut frames = Vec::new();
    let mut poses = Vec::new();
    for (t, name) in &rgb {
        let d = match &depth {
            Some(rows) => match nearest(&depth_times, *t, tolerance) {
                Some(j) => Some(root.join(&rows[j].1)),
                None => continue,
            },
            None => None,
        };
        if let Some(rows) = &gt {
            match nearest(&gt_times, *t, tolerance) {
                Some(j) => {
                    let mut s = rows[j];
                    s.orientation.renormalize();
                    poses.push(s.to_pose());
                }
                None => continue,
            }
        }
        frames.push(Frame {
            timestamp: *t,
            color: root.join(name),
            depth: d,
        });
    }
    if frames.is_empty() {
        return Err(DatasetError::NoAssociations { tolerance });
    }
    for f in &frames {
        require(&f.color)?;
        if let Some(d) = &f.depth {
            require(d)?;
        }
    }
    check_order(&frames)?;
    let default = PinholeCamera {
        fx: 525.0,
        fy: 525.0,
        cx: 319.5,
        cy: 239.5,
        width: 640,
        height: 480,
    };
    let camera = read_camera(root, default, &frames[0].color)?;
    Ok(Dataset {
        frames,
        camera,
        ground_truth: gt.map(|_| poses),
        depth_scale: TUM_DEPTH_SCALE,
    })
}

/// Replica as commonly preprocessed: `results/frameNNNNNN.jpg`,
/// `results/depthNNNNNN.png` and `traj.txt` with one row-major 4×4
/// camera-to-world matrix per line. Frames are stamped at 30 Hz.
pub fn load_replica_dataset(root: &Path) -> Result<Dataset, DatasetError> {
    let traj_path = root.join("traj.txt");
    let text = read_text(&traj_path)?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DatasetError::Parse {
                path: traj_path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if vals.len() != 16 {
            return Err(DatasetError::Parse {
                path: traj_path.clone(),
                line: i + 1,
                message: format!("expected 16 values, got {}", vals.len()),
            });
        }
        let m = Matrix4::from_row_slice(&vals);
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        let c = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
        poses.push(RigidPose::from_camera_to_world(fgo_core::geometry::rotation_from_matrix(&r), c));
    }
    if poses.is_empty() {
        return Err(DatasetError::NoAssociations { tolerance: 0.0 });
    }
    let results = root.join("results");
    let frames: Vec<Frame> = (0..poses.len())
        .map(|i| Frame {
            timestamp: i as f64 / 30.0,
            color: results.join(format!("frame{i:06}.jpg")),
            depth: Some(results.join(format!("depth{i:06}.png"))),
        })
        .collect();
    for f in &frames {
        require(&f.color)?;
        require(f.depth.as_ref().expect("set above"))?;
    }
    let default = PinholeCamera {
        fx: 600.0,
        fy: 600.0,
        cx: 599.5,
        cy: 339.5,
        width: 1200,
        height: 680,
    };
    let camera = read_camera(root, default, &frames[0].color)?;
    Ok(Dataset {
        frames,
        camera,
        ground_truth: Some(poses),
        depth_scale: REPLICA_DEPTH_SCALE,
    })
}

/// Picks the loader from the directory layout.
pub fn load_dataset(root: &Path) -> Result<Dataset, DatasetError> {
    if root.join("rgb.txt").is_file() {
        load_tum_dataset(root, DEFAULT_ASSOCIATION_TOLERANCE)
    } else if root.join("traj.txt").is_file() && root.join("results").is_dir() {
        load_replica_dataset(root)
    } else {
        Err(DatasetError::UnknownLayout(root.to_path_buf()))
    }
}

fn image_error(path: &Path, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Colour image in [0, 1], resized to `size` when given.
pub fn load_color(path: &Path, size: Option<(usize, usize)>) -> Result<ImageRgb, DatasetError> {
    let mut img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    if let Some((w, h)) = size {
        if (img.width() as usize, img.height() as usize) != (w, h) {
            img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
        }
    }
    let mut out = ImageRgb::new(img.width() as usize, img.height() as usize);
    for (dst, p) in out.data.iter_mut().zip(img.pixels()) {
        *dst = Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) / 255.0;
    }
    Ok(out)
}

/// 16-bit depth PNG divided by `scale`; zero stays invalid. Resizing uses
/// nearest samples so depths are never blended across edges.
pub fn load_depth(path: &Path, scale: f64, size: Option<(usize, usize)>) -> Result<DepthMap, DatasetError> {
    let mut img = image::open(path).map_err(|e| image_error(path, e))?.to_luma16();
    if let Some((w, h)) = size {
        if (img.width() as usize, img.height() as usize) != (w, h) {
            img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Nearest);
        }
    }
    let mut out = DepthMap::new(img.width() as usize, img.height() as usize);
    for (dst, p) in out.data.iter_mut().zip(img.pixels()) {
        *dst = p[0] as f64 / scale;
    }
    Ok(out)
}

/// Writes `img` as an 8-bit PNG.
pub fn save_color(path: &Path, img: &ImageRgb) -> Result<(), DatasetError> {
    let mut out = image::RgbImage::new(img.width as u32, img.height as u32);
    for (p, v) in out.pixels_mut().zip(&img.data) {
        *p = image::Rgb([0, 1, 2].map(|c| (v[c].clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    out.save(path).map_err(|e| image_error(path, e))
}
