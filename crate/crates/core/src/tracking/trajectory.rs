//! TUM trajectory files: `timestamp tx ty tz qx qy qz qw`, camera-to-world.

use std::io::{self, BufRead, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::RigidPose;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Camera-to-world pose with a timestamp, stored exactly as written.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub timestamp: f64,
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl StampedPose {
    pub fn from_pose(timestamp: f64, pose: &RigidPose) -> Self {
        Self {
            timestamp,
            position: pose.camera_center(),
            orientation: pose.rotation.inverse(),
        }
    }

    /// World-to-camera pose.
    pub fn to_pose(&self) -> RigidPose {
        RigidPose::from_camera_to_world(self.orientation, self.position)
    }
}

pub fn write_tum(w: &mut impl Write, poses: &[StampedPose]) -> io::Result<()> {
    for p in poses {
        let q = p.orientation.quaternion();
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            p.timestamp, p.position.x, p.position.y, p.position.z, q.i, q.j, q.k, q.w
        )?;
    }
    Ok(())
}

pub fn read_tum(r: impl BufRead) -> Result<Vec<StampedPose>, TrajectoryError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| TrajectoryError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if vals.len() != 8 {
            return Err(TrajectoryError::Parse {
                line: i + 1,
                message: format!("expected 8 values, got {}", vals.len()),
            });
        }
        out.push(StampedPose {
            timestamp: vals[0],
            position: Vector3::new(vals[1], vals[2], vals[3]),
            orientation: UnitQuaternion::new_unchecked(Quaternion::new(vals[7], vals[4], vals[5], vals[6])),
        });
    }
    Ok(out)
}

pub fn save_tum(path: &Path, poses: &[StampedPose]) -> Result<(), TrajectoryError> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    write_tum(&mut w, poses)?;
    w.flush()?;
    Ok(())
}

pub fn load_tum(path: &Path) -> Result<Vec<StampedPose>, TrajectoryError> {
    read_tum(io::BufReader::new(std::fs::File::open(path)?))
}
