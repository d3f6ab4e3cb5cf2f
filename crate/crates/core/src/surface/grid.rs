use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::delaunay::{tetrahedralize, DelaunayError};
use crate::geometry::GaussianPrimitive;
use crate::opacity::{point_opacity, View};

/// Coincident box points closer than this are merged.
pub const DEDUP_TOLERANCE: f64 = 1e-9;
/// Tetrahedra with smaller volume (m³) are dropped.
pub const MIN_TET_VOLUME: f64 = 1e-15;

/// Which box point of a Gaussian produced a grid vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxPoint {
    /// Corner `i`; bit k of `i` selects the sign along rotated axis k.
    Corner(u8),
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub gaussian: usize,
    pub point: BoxPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TetGrid {
    pub vertices: Vec<Vector3<f64>>,
    /// Every box point merged into a vertex.
    pub provenance: Vec<Vec<Provenance>>,
    pub tetrahedra: Vec<[usize; 4]>,
    /// Filled by [`evaluate_vertex_opacity`]; zero before.
    pub opacity: Vec<f64>,
}

/// How "maximum scale" is measured by the edge filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeScale {
    /// `3·max(s)`, the extent of the box itself.
    #[default]
    ThreeSigma,
    /// `max(s)`.
    Raw,
}

impl EdgeScale {
    fn factor(self) -> f64 {
        match self {
            EdgeScale::ThreeSigma => 3.0,
            EdgeScale::Raw => 1.0,
        }
    }
}

/// The 8 corners of the 3σ box of `g` followed by its center.
pub fn box_points(g: &GaussianPrimitive) -> [Vector3<f64>; 9] {
    let mut out = [g.mean; 9];
    out[..8].copy_from_slice(&g.box_corners(3.0));
    out
}

fn tet_volume(v: &[Vector3<f64>], t: &[usize; 4]) -> f64 {
    (v[t[1]] - v[t[0]]).cross(&(v[t[2]] - v[t[0]])).dot(&(v[t[3]] - v[t[0]])) / 6.0
}

/// Box points of every Gaussian, deduplicated and Delaunay tetrahedralized.
/// Returned tetrahedra have positive volume.
pub fn build_tet_grid(map: &[GaussianPrimitive]) -> Result<TetGrid, DelaunayError> {
    let mut vertices: Vec<Vector3<f64>> = Vec::new();
    let mut provenance: Vec<Vec<Provenance>> = Vec::new();
    // Hash on a grid of cell size DEDUP_TOLERANCE and probe the neighbours.
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    let cell = |p: &Vector3<f64>| p.map(|x| (x / DEDUP_TOLERANCE).floor() as i64);
    for (gi, g) in map.iter().enumerate() {
        for (k, p) in box_points(g).iter().enumerate() {
            let point = if k < 8 { BoxPoint::Corner(k as u8) } else { BoxPoint::Center };
            let prov = Provenance { gaussian: gi, point };
            let c = cell(p);
            let mut found = None;
            'probe: for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(ids) = cells.get(&[c.x + dx, c.y + dy, c.z + dz]) {
                            if let Some(&id) = ids.iter().find(|&&id| (vertices[id] - p).norm() <= DEDUP_TOLERANCE) {
                                found = Some(id);
                                break 'probe;
                            }
                        }
                    }
                }
            }
            match found {
                Some(id) => provenance[id].push(prov),
                None => {
                    cells.entry([c.x, c.y, c.z]).or_default().push(vertices.len());
                    vertices.push(*p);
                    provenance.push(vec![prov]);
                }
            }
        }
    }
    let tetrahedra = tetrahedralize(&vertices)?
        .into_iter()
        .filter_map(|mut t| {
            let v = tet_volume(&vertices, &t);
            if v.abs() <= MIN_TET_VOLUME {
                return None;
            }
            if v < 0.0 {
                t.swap(0, 1);
            }
            Some(t)
        })
        .collect();
    let n = vertices.len();
    Ok(TetGrid {
        vertices,
        provenance,
        tetrahedra,
        opacity: vec![0.0; n],
    })
}

/// Whether the edge `a`–`b` connects two Gaussians whose means are further
/// apart than the sum of their maximum scales. Edges within one Gaussian are
/// exempt.
fn edge_too_long(grid: &TetGrid, map: &[GaussianPrimitive], a: usize, b: usize, scale: EdgeScale) -> bool {
    let pa = &grid.provenance[a];
    let pb = &grid.provenance[b];
    if pa.iter().any(|x| pb.iter().any(|y| x.gaussian == y.gaussian)) {
        return false;
    }
    let k = scale.factor();
    pa.iter().all(|x| {
        pb.iter().all(|y| {
            let (ga, gb) = (&map[x.gaussian], &map[y.gaussian]);
            (ga.mean - gb.mean).norm() > k * (ga.scale.max() + gb.scale.max())
        })
    })
}

/// Remove every tetrahedron with an over-long edge between distinct Gaussians.
pub fn filter_tets(grid: &TetGrid, map: &[GaussianPrimitive], scale: EdgeScale) -> TetGrid {
    const EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
    let tetrahedra = grid
        .tetrahedra
        .iter()
        .filter(|t| !EDGES.iter().any(|&(i, j)| edge_too_long(grid, map, t[i], t[j], scale)))
        .copied()
        .collect();
    TetGrid {
        tetrahedra,
        ..grid.clone()
    }
}

/// Point opacity at every grid vertex over the given views; vertices no view
/// can see get 0.
pub fn evaluate_vertex_opacity(grid: &TetGrid, views: &[View], map: &[GaussianPrimitive]) -> TetGrid {
    let opacity = grid
        .vertices
        .par_iter()
        .map(|p| point_opacity(p, views, map).unwrap_or(0.0))
        .collect();
    TetGrid {
        opacity,
        ..grid.clone()
    }
}
