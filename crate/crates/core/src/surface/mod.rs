//! Mesh extraction from the opacity field of a Gaussian map: box points of
//! every Gaussian are tetrahedralized, long cross-Gaussian edges removed,
//! vertex opacities evaluated on keyframe views, and the level set traced
//! with marching tetrahedra and refined by bisection.

pub mod delaunay;
mod grid;
mod marching;
pub mod ply;

use serde::{Deserialize, Serialize};

pub use delaunay::DelaunayError;
pub use grid::{
    box_points, build_tet_grid, evaluate_vertex_opacity, filter_tets, BoxPoint, EdgeScale, Provenance, TetGrid,
    DEDUP_TOLERANCE, MIN_TET_VOLUME,
};
pub use marching::{
    interpolate_crossing, marching_tetrahedra, refine_level_set, EdgeOrigin, Refined, TriangleMesh, MIN_TRIANGLE_AREA,
};
pub use ply::{load_ply, read_ply, save_ply, write_ply, PlyError, PlyFormat};

use crate::geometry::GaussianPrimitive;
use crate::opacity::View;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub tau: f64,
    pub iterations: usize,
    pub edge_scale: EdgeScale,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            iterations: 8,
            edge_scale: EdgeScale::ThreeSigma,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExtractionError {
    #[error("empty map")]
    EmptyMap,
    #[error("no views")]
    NoViews,
    #[error("tau must lie in (0, 1), got {0}")]
    InvalidTau(f64),
    #[error("tetrahedralization failed: {0}")]
    Tetrahedralization(#[from] DelaunayError),
}

/// Mesh of the `tau` level set, plus the indices of refined vertices whose
/// bracket was violated.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub mesh: TriangleMesh,
    pub bracket_violations: Vec<usize>,
    pub grid_vertices: usize,
    pub grid_tetrahedra: usize,
}

/// Full extraction. On coplanar box points the grid is rebuilt once with the
/// means jittered by 1e-9 of the map extent.
pub fn extract_mesh(
    map: &[GaussianPrimitive],
    views: &[View],
    config: &ExtractionConfig,
) -> Result<Extraction, ExtractionError> {
    if map.is_empty() {
        return Err(ExtractionError::EmptyMap);
    }
    if views.is_empty() {
        return Err(ExtractionError::NoViews);
    }
    if !(config.tau > 0.0 && config.tau < 1.0) {
        return Err(ExtractionError::InvalidTau(config.tau));
    }
    let grid = match build_tet_grid(map) {
        Ok(g) => g,
        Err(DelaunayError::Coplanar) => {
            let mut lo = map[0].mean;
            let mut hi = map[0].mean;
            for g in map {
                lo = lo.inf(&g.mean);
                hi = hi.sup(&g.mean);
            }
            let extent = (hi - lo).norm().max(map.iter().map(|g| g.scale.max()).fold(0.0, f64::max));
            let jittered: Vec<GaussianPrimitive> = map
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    let mut g = g.clone();
                    let k = i as f64;
                    g.mean += nalgebra::Vector3::new((k * 0.7).sin(), (k * 1.3).cos(), (k * 2.1).sin()) * 1e-9 * extent;
                    g
                })
                .collect();
            build_tet_grid(&jittered)?
        }
        Err(e) => return Err(e.into()),
    };
    let grid = filter_tets(&grid, map, config.edge_scale);
    let grid = evaluate_vertex_opacity(&grid, views, map);
    let (mesh, origins) = marching_tetrahedra(&grid, config.tau);
    let refined = refine_level_set(&mesh, &origins, &grid, map, views, config.tau, config.iterations);
    Ok(Extraction {
        mesh: refined.mesh,
        bracket_violations: refined.bracket_violations,
        grid_vertices: grid.vertices.len(),
        grid_tetrahedra: grid.tetrahedra.len(),
    })
}
