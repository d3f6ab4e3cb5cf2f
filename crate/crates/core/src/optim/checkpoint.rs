//! Binary map checkpoint: `"FGOMAP\0"`, u32 format version, u64 iteration,
//! length-prefixed JSON config, the Gaussians, then the keyframe views.
//! All numbers are little endian.

use std::io::{self, Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use super::config::OptimizerConfig;
use crate::geometry::{GaussianPrimitive, PinholeCamera, RigidPose};
use crate::opacity::View;

pub const MAGIC: &[u8; 7] = b"FGOMAP\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a map checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config: OptimizerConfig,
    pub map: Vec<GaussianPrimitive>,
    pub views: Vec<View>,
}

fn put_f64s(w: &mut impl Write, vals: &[f64]) -> io::Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s<const N: usize>(r: &mut impl Read) -> io::Result<[f64; N]> {
    let mut out = [0.0; N];
    let mut b = [0u8; 8];
    for v in out.iter_mut() {
        r.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    Ok(out)
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&ckpt.iteration.to_le_bytes())?;
    let json = serde_json::to_vec(&ckpt.config).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(ckpt.map.len() as u64).to_le_bytes())?;
    for g in &ckpt.map {
        let q = g.rotation.quaternion();
        put_f64s(
            w,
            &[
                g.mean.x, g.mean.y, g.mean.z, q.w, q.i, q.j, q.k, g.scale.x, g.scale.y, g.scale.z, g.opacity,
                g.color.x, g.color.y, g.color.z,
            ],
        )?;
    }
    w.write_all(&(ckpt.views.len() as u64).to_le_bytes())?;
    for v in &ckpt.views {
        let q = v.pose.rotation.quaternion();
        let t = v.pose.translation;
        let c = &v.camera;
        put_f64s(w, &[q.w, q.i, q.j, q.k, t.x, t.y, t.z, c.fx, c.fy, c.cx, c.cy])?;
        w.write_all(&(c.width as u32).to_le_bytes())?;
        w.write_all(&(c.height as u32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = get_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let iteration = get_u64(r)?;
    let json_len = get_u64(r)? as usize;
    if json_len > 1 << 24 {
        return Err(CheckpointError::Corrupt("config block too large".into()));
    }
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let config: OptimizerConfig =
        serde_json::from_slice(&json).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let n = get_u64(r)?;
    let mut map = Vec::new();
    for _ in 0..n {
        let a: [f64; 14] = get_f64s(r)?;
        let g = GaussianPrimitive {
            mean: Vector3::new(a[0], a[1], a[2]),
            rotation: UnitQuaternion::new_unchecked(Quaternion::new(a[3], a[4], a[5], a[6])),
            scale: Vector3::new(a[7], a[8], a[9]),
            opacity: a[10],
            color: Vector3::new(a[11], a[12], a[13]),
        };
        g.validate().map_err(|e| CheckpointError::Corrupt(format!("gaussian {}: {e}", map.len())))?;
        map.push(g);
    }
    let n_views = get_u64(r)?;
    let mut views = Vec::new();
    for _ in 0..n_views {
        let a: [f64; 11] = get_f64s(r)?;
        let width = get_u32(r)? as usize;
        let height = get_u32(r)? as usize;
        let camera = PinholeCamera::new(a[7], a[8], a[9], a[10], width, height)
            .map_err(|e| CheckpointError::Corrupt(format!("view {}: {e}", views.len())))?;
        let pose = RigidPose::new(
            UnitQuaternion::new_unchecked(Quaternion::new(a[0], a[1], a[2], a[3])),
            Vector3::new(a[4], a[5], a[6]),
        );
        views.push(View { pose, camera });
    }
    Ok(Checkpoint {
        iteration,
        config,
        map,
        views,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            iteration: 1234,
            config: OptimizerConfig {
                alpha: 100.0,
                ..Default::default()
            },
            map: vec![GaussianPrimitive {
                mean: Vector3::new(0.1, -0.2, 3.0),
                rotation: UnitQuaternion::from_scaled_axis(Vector3::new(0.2, 0.1, 0.3)),
                scale: Vector3::new(0.01, 0.2, 0.3),
                opacity: 0.7,
                color: Vector3::new(0.2, 0.3, 0.4),
            }],
            views: vec![View {
                pose: RigidPose::look_at(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros(), Vector3::y()),
                camera: PinholeCamera::new(50.0, 51.0, 31.5, 23.5, 64, 48).unwrap(),
            }],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        assert_eq!(&buf[..7], MAGIC);
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn rejects_bad_header_and_version() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(CheckpointError::BadMagic)));
        let mut bad = buf.clone();
        bad[7] = 9;
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(CheckpointError::Version(9))));
        let truncated = &buf[..buf.len() - 3];
        assert!(read_checkpoint(&mut &truncated[..]).is_err());
    }
}
