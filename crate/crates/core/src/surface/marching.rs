use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use super::grid::TetGrid;
use crate::geometry::GaussianPrimitive;
use crate::opacity::{point_opacity, View};

/// Triangles smaller than this (m²) are dropped.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl TriangleMesh {
    /// Signed enclosed volume; positive for outward-facing closed meshes.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| triangle_area(&self.vertices, t)).sum()
    }

    /// Area-weighted vertex normals.
    pub fn compute_normals(&mut self) {
        let mut n = vec![Vector3::zeros(); self.vertices.len()];
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| self.vertices[i]);
            let face = (b - a).cross(&(c - a));
            for &i in t {
                n[i] += face;
            }
        }
        for v in n.iter_mut() {
            *v = v.try_normalize(0.0).unwrap_or_else(Vector3::zeros);
        }
        self.normals = Some(n);
    }
}

fn triangle_area(v: &[Vector3<f64>], t: &[usize; 3]) -> f64 {
    (v[t[1]] - v[t[0]]).cross(&(v[t[2]] - v[t[0]])).norm() / 2.0
}

/// The grid edge a mesh vertex was placed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EdgeOrigin {
    /// Endpoint above the level.
    pub inside: usize,
    /// Endpoint at or below the level.
    pub outside: usize,
}

const EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// Crossing edges per inside-vertex bitmask, as triangles over edge indices.
/// Orientation is fixed geometrically afterwards.
const CASES: [&[[usize; 3]]; 16] = [
    &[],
    &[[0, 1, 2]],
    &[[0, 3, 4]],
    &[[1, 3, 4], [1, 4, 2]],
    &[[1, 3, 5]],
    &[[0, 3, 5], [0, 5, 2]],
    &[[0, 4, 5], [0, 5, 1]],
    &[[2, 4, 5]],
    &[[2, 4, 5]],
    &[[0, 4, 5], [0, 5, 1]],
    &[[0, 3, 5], [0, 5, 2]],
    &[[1, 3, 5]],
    &[[1, 3, 4], [1, 4, 2]],
    &[[0, 3, 4]],
    &[[0, 1, 2]],
    &[],
];

/// Linear crossing point of the level `tau` on the edge.
pub fn interpolate_crossing(pa: &Vector3<f64>, oa: f64, pb: &Vector3<f64>, ob: f64, tau: f64) -> Vector3<f64> {
    let t = ((tau - oa) / (ob - oa)).clamp(0.0, 1.0);
    pa + (pb - pa) * t
}

/// Marching tetrahedra at level `tau`. A vertex is inside when its opacity
/// exceeds `tau`; faces point toward lower opacity. Returns the mesh and,
/// per mesh vertex, the grid edge it lies on.
pub fn marching_tetrahedra(grid: &TetGrid, tau: f64) -> (TriangleMesh, Vec<EdgeOrigin>) {
    let mut vertices = Vec::new();
    let mut origins = Vec::new();
    let mut index: HashMap<EdgeOrigin, usize> = HashMap::new();
    let mut triangles = Vec::new();
    for t in &grid.tetrahedra {
        let inside = t.map(|v| grid.opacity[v] > tau);
        let case = (0..4).fold(0, |m, k| m | (inside[k] as usize) << k);
        if CASES[case].is_empty() {
            continue;
        }
        let (mut cin, mut cout, mut nin) = (Vector3::zeros(), Vector3::zeros(), 0.0);
        for k in 0..4 {
            if inside[k] {
                cin += grid.vertices[t[k]];
                nin += 1.0;
            } else {
                cout += grid.vertices[t[k]];
            }
        }
        let outward = cout / (4.0 - nin) - cin / nin;
        for tri in CASES[case] {
            let ids = tri.map(|e| {
                let (i, j) = EDGES[e];
                let (a, b) = if inside[i] { (t[i], t[j]) } else { (t[j], t[i]) };
                let key = EdgeOrigin { inside: a, outside: b };
                *index.entry(key).or_insert_with(|| {
                    vertices.push(interpolate_crossing(
                        &grid.vertices[a],
                        grid.opacity[a],
                        &grid.vertices[b],
                        grid.opacity[b],
                        tau,
                    ));
                    origins.push(key);
                    vertices.len() - 1
                })
            });
            triangles.push(ids);
        }
        // Orient the triangles just added.
        let added = CASES[case].len();
        let start = triangles.len() - added;
        for tri in &mut triangles[start..] {
            let [a, b, c] = tri.map(|i| vertices[i]);
            if (b - a).cross(&(c - a)).dot(&outward) < 0.0 {
                tri.swap(1, 2);
            }
        }
    }
    let mesh = TriangleMesh {
        vertices,
        triangles,
        normals: None,
    };
    compact(mesh, origins)
}

/// Drop degenerate triangles and unreferenced vertices.
fn compact(mesh: TriangleMesh, origins: Vec<EdgeOrigin>) -> (TriangleMesh, Vec<EdgeOrigin>) {
    let triangles: Vec<[usize; 3]> = mesh
        .triangles
        .into_iter()
        .filter(|t| triangle_area(&mesh.vertices, t) > MIN_TRIANGLE_AREA)
        .collect();
    let mut remap = vec![usize::MAX; mesh.vertices.len()];
    let mut vertices = Vec::new();
    let mut kept = Vec::new();
    let mut out = Vec::with_capacity(triangles.len());
    for t in &triangles {
        out.push(t.map(|i| {
            if remap[i] == usize::MAX {
                remap[i] = vertices.len();
                vertices.push(mesh.vertices[i]);
                kept.push(origins[i]);
            }
            remap[i]
        }));
    }
    let mut mesh = TriangleMesh {
        vertices,
        triangles: out,
        normals: None,
    };
    mesh.compute_normals();
    (mesh, kept)
}

/// Result of [`refine_level_set`].
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub mesh: TriangleMesh,
    /// Vertices whose edge no longer straddles the level; they keep the
    /// linear estimate.
    pub bracket_violations: Vec<usize>,
}

/// Move every mesh vertex onto the `tau` level of the true point opacity by
/// bisection along its generating edge, `iterations` halvings, then linear
/// interpolation inside the final bracket.
pub fn refine_level_set(
    mesh: &TriangleMesh,
    origins: &[EdgeOrigin],
    grid: &TetGrid,
    map: &[GaussianPrimitive],
    views: &[View],
    tau: f64,
    iterations: usize,
) -> Refined {
    if iterations == 0 {
        return Refined {
            mesh: mesh.clone(),
            bracket_violations: Vec::new(),
        };
    }
    let opacity = |p: &Vector3<f64>| point_opacity(p, views, map).unwrap_or(0.0);
    let results: Vec<Option<Vector3<f64>>> = origins
        .par_iter()
        .map(|e| {
            let (mut a, mut b) = (grid.vertices[e.inside], grid.vertices[e.outside]);
            let (mut oa, mut ob) = (opacity(&a), opacity(&b));
            if !(oa > tau && ob <= tau) {
                return None;
            }
            for _ in 0..iterations {
                let m = (a + b) / 2.0;
                let om = opacity(&m);
                if om > tau {
                    a = m;
                    oa = om;
                } else {
                    b = m;
                    ob = om;
                }
            }
            Some(interpolate_crossing(&a, oa, &b, ob, tau))
        })
        .collect();
    let mut out = mesh.clone();
    let mut bracket_violations = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Some(p) => out.vertices[i] = p,
            None => bracket_violations.push(i),
        }
    }
    out.compute_normals();
    Refined {
        mesh: out,
        bracket_violations,
    }
}
