//! Incremental Bowyer–Watson Delaunay tetrahedralization with exact
//! orientation and in-sphere predicates.
//!
//! Predicates run on a copy of the points with a tiny deterministic jitter so
//! that cospherical and coplanar configurations (box corners are both) get a
//! consistent combinatorial answer; callers keep the exact coordinates.

use std::collections::HashMap;

use nalgebra::Vector3;
use robust::{insphere, orient3d, Coord3D};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DelaunayError {
    #[error("need at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("points are coplanar")]
    Coplanar,
    #[error("point location failed")]
    LocationFailed,
}

const NONE: usize = usize::MAX;

#[derive(Clone, Copy)]
struct Tet {
    v: [usize; 4],
    /// Neighbour across the face opposite `v[i]`.
    nb: [usize; 4],
    alive: bool,
}

fn coord(p: &Vector3<f64>) -> Coord3D<f64> {
    Coord3D { x: p.x, y: p.y, z: p.z }
}

fn orient(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>, d: &Vector3<f64>) -> f64 {
    orient3d(coord(a), coord(b), coord(c), coord(d))
}

/// SplitMix64, used for the jitter and the walk's face order.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn morton_key(p: &Vector3<f64>, lo: &Vector3<f64>, span: f64) -> u64 {
    let q = |v: f64, l: f64| (((v - l) / span).clamp(0.0, 1.0) * 1_048_575.0) as u64;
    let spread = |mut x: u64| {
        x &= 0x1f_ffff;
        x = (x | (x << 32)) & 0x1f_0000_0000_ffff;
        x = (x | (x << 16)) & 0x1f_0000_ff00_00ff;
        x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
        x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
        x = (x | (x << 2)) & 0x1249_2492_4924_9249;
        x
    };
    spread(q(p.x, lo.x)) | (spread(q(p.y, lo.y)) << 1) | (spread(q(p.z, lo.z)) << 2)
}

/// Delaunay tetrahedralization of `points`. Returned tetrahedra index into
/// `points` and are positively oriented in the jittered coordinates.
pub fn tetrahedralize(points: &[Vector3<f64>]) -> Result<Vec<[usize; 4]>, DelaunayError> {
    let n = points.len();
    if n < 4 {
        return Err(DelaunayError::TooFewPoints(n));
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let span = (hi - lo).max().max(1e-12);
    if is_coplanar(points) {
        return Err(DelaunayError::Coplanar);
    }

    let jitter = 1e-10 * span;
    let mut verts: Vec<Vector3<f64>> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let h = mix(i as u64);
            p + Vector3::new(unit(h), unit(mix(h)), unit(mix(mix(h)))) * jitter
        })
        .collect();

    // Enclosing tetrahedron.
    let c = (lo + hi) / 2.0;
    let r = span * 1e4;
    let sup = [
        c + Vector3::new(0.0, 0.0, 3.0 * r),
        c + Vector3::new(2.0 * 2f64.sqrt() * r, 0.0, -r),
        c + Vector3::new(-2f64.sqrt() * r, 6f64.sqrt() * r, -r),
        c + Vector3::new(-2f64.sqrt() * r, -6f64.sqrt() * r, -r),
    ];
    verts.extend_from_slice(&sup);
    let mut first = [n, n + 1, n + 2, n + 3];
    if orient(&verts[first[0]], &verts[first[1]], &verts[first[2]], &verts[first[3]]) < 0.0 {
        first.swap(0, 1);
    }
    let mut tets = vec![Tet {
        v: first,
        nb: [NONE; 4],
        alive: true,
    }];

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (morton_key(&points[i], &lo, span), i));

    let mut last = 0usize;
    let mut bad: Vec<usize> = Vec::new();
    let mut is_bad: Vec<bool> = vec![false];
    let mut stack: Vec<usize> = Vec::new();
    for (step, &pi) in order.iter().enumerate() {
        let p = verts[pi];
        let start = locate(&tets, &verts, &p, last, step as u64)?;

        // Cavity: connected set of tetrahedra whose circumsphere contains p.
        bad.clear();
        stack.clear();
        stack.push(start);
        is_bad[start] = true;
        while let Some(t) = stack.pop() {
            bad.push(t);
            for &nb in &tets[t].nb {
                if nb == NONE || is_bad[nb] {
                    continue;
                }
                let v = tets[nb].v;
                if insphere(
                    coord(&verts[v[0]]),
                    coord(&verts[v[1]]),
                    coord(&verts[v[2]]),
                    coord(&verts[v[3]]),
                    coord(&p),
                ) > 0.0
                {
                    is_bad[nb] = true;
                    stack.push(nb);
                }
            }
        }

        // Re-triangulate the cavity boundary with p.
        let mut edge_faces: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        let mut created = Vec::new();
        for &t in &bad {
            for i in 0..4 {
                let nb = tets[t].nb[i];
                if nb != NONE && is_bad[nb] {
                    continue;
                }
                let mut v = tets[t].v;
                v[i] = pi;
                let id = tets.len();
                tets.push(Tet {
                    v,
                    nb: [NONE; 4],
                    alive: true,
                });
                is_bad.push(false);
                tets[id].nb[i] = nb;
                if nb != NONE {
                    let back = tets[nb].nb.iter().position(|&x| x == t).expect("adjacency is symmetric");
                    tets[nb].nb[back] = id;
                }
                created.push(id);
                for j in 0..4 {
                    if j == i {
                        continue;
                    }
                    let mut other = [0usize; 2];
                    let mut k = 0;
                    for (m, &vm) in v.iter().enumerate() {
                        if m != i && m != j {
                            other[k] = vm;
                            k += 1;
                        }
                    }
                    let key = (other[0].min(other[1]), other[0].max(other[1]));
                    if let Some((ot, oj)) = edge_faces.remove(&key) {
                        tets[id].nb[j] = ot;
                        tets[ot].nb[oj] = id;
                    } else {
                        edge_faces.insert(key, (id, j));
                    }
                }
            }
        }
        for &t in &bad {
            tets[t].alive = false;
        }
        last = *created.last().ok_or(DelaunayError::LocationFailed)?;
    }

    Ok(tets
        .iter()
        .filter(|t| t.alive && t.v.iter().all(|&v| v < n))
        .map(|t| t.v)
        .collect())
}

/// Visibility walk from `start`; face order is varied per step so the walk
/// cannot cycle on degenerate configurations.
fn locate(tets: &[Tet], verts: &[Vector3<f64>], p: &Vector3<f64>, start: usize, salt: u64) -> Result<usize, DelaunayError> {
    let mut t = start;
    if !tets[t].alive {
        t = tets.iter().rposition(|t| t.alive).ok_or(DelaunayError::LocationFailed)?;
    }
    let limit = 4 * tets.len() + 64;
    let mut rng = mix(salt);
    'walk: for _ in 0..limit {
        rng = mix(rng);
        let offset = (rng % 4) as usize;
        let v = tets[t].v;
        for k in 0..4 {
            let i = (k + offset) % 4;
            let mut q = [&verts[v[0]], &verts[v[1]], &verts[v[2]], &verts[v[3]]];
            q[i] = p;
            if orient(q[0], q[1], q[2], q[3]) < 0.0 {
                let nb = tets[t].nb[i];
                if nb == NONE {
                    return Err(DelaunayError::LocationFailed);
                }
                t = nb;
                continue 'walk;
            }
        }
        return Ok(t);
    }
    Err(DelaunayError::LocationFailed)
}

fn is_coplanar(points: &[Vector3<f64>]) -> bool {
    let a = points[0];
    let Some(b) = points.iter().find(|p| **p != a) else { return true };
    let Some(c) = points
        .iter()
        .find(|p| (*p - a).cross(&(b - a)).norm_squared() > 0.0)
    else {
        return true;
    };
    points.iter().all(|d| orient(&a, b, c, d) == 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn volume(p: &[Vector3<f64>], t: &[usize; 4]) -> f64 {
        (p[t[1]] - p[t[0]]).cross(&(p[t[2]] - p[t[0]])).dot(&(p[t[3]] - p[t[0]])) / 6.0
    }

    fn hull_volume_of_cube(points: &[Vector3<f64>], tets: &[[usize; 4]]) -> f64 {
        tets.iter().map(|t| volume(points, t).abs()).sum::<f64>() + 0.0 * points.len() as f64
    }

    #[test]
    fn cube_with_center_fills_the_cube() {
        let mut pts = Vec::new();
        for &x in &[-1.0, 1.0] {
            for &y in &[-1.0, 1.0] {
                for &z in &[-1.0, 1.0] {
                    pts.push(Vector3::new(x, y, z));
                }
            }
        }
        pts.push(Vector3::zeros());
        let tets = tetrahedralize(&pts).unwrap();
        let total = hull_volume_of_cube(&pts, &tets);
        assert!((total - 8.0).abs() < 1e-9, "volume {total}");
        assert!(tets.iter().all(|t| t.contains(&8)));
        assert_eq!(tets.len(), 12);
    }

    #[test]
    fn random_points_are_delaunay_and_fill_the_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vector3<f64>> = (0..300)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let tets = tetrahedralize(&pts).unwrap();
        for t in &tets {
            let v = t.map(|i| coord(&pts[i]));
            let o = orient3d(v[0], v[1], v[2], v[3]);
            assert!(o > 0.0);
            for (i, p) in pts.iter().enumerate() {
                if t.contains(&i) {
                    continue;
                }
                assert!(insphere(v[0], v[1], v[2], v[3], coord(p)) <= 0.0);
            }
        }
        // Every point is used.
        let mut used = vec![false; pts.len()];
        for t in &tets {
            for &i in t {
                used[i] = true;
            }
        }
        assert!(used.iter().all(|u| *u));
    }

    #[test]
    fn coplanar_input_is_rejected() {
        let pts: Vec<Vector3<f64>> = (0..10).map(|i| Vector3::new(i as f64, (i * i) as f64, 0.0)).collect();
        assert_eq!(tetrahedralize(&pts), Err(DelaunayError::Coplanar));
        assert_eq!(tetrahedralize(&pts[..3]), Err(DelaunayError::TooFewPoints(3)));
    }
}
