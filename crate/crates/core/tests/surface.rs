//! Mesh extraction: grid construction, filtering, opacity evaluation,
//! marching tetrahedra, level-set refinement.

use std::collections::HashSet;

use fgo_core::geometry::{GaussianPrimitive, PinholeCamera, RigidPose};
use fgo_core::opacity::{point_opacity, View};
use fgo_core::surface::*;
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn iso(mean: Vector3<f64>, s: f64, opacity: f64) -> GaussianPrimitive {
    GaussianPrimitive::isotropic(mean, s, opacity, Vector3::repeat(0.5))
}

/// Six views on the coordinate axes, looking at `target`.
fn axis_views(target: Vector3<f64>, dist: f64) -> Vec<View> {
    let camera = PinholeCamera::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
    let dirs: [Vector3<f64>; 6] = [Vector3::x(), -Vector3::x(), Vector3::y(), -Vector3::y(), Vector3::z(), -Vector3::z()];
    dirs.iter()
        .map(|d| {
            let up = if d.y.abs() > 0.5 { Vector3::z() } else { Vector3::y() };
            View {
                pose: RigidPose::look_at(target + d * dist, target, up),
                camera,
            }
        })
        .collect()
}

fn random_map(seed: u64, n: usize) -> Vec<GaussianPrimitive> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| GaussianPrimitive {
            mean: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            rotation: UnitQuaternion::from_scaled_axis(Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            )),
            scale: Vector3::new(rng.gen_range(0.02..0.2), rng.gen_range(0.02..0.2), rng.gen_range(0.02..0.2)),
            opacity: rng.gen_range(0.3..1.0),
            color: Vector3::repeat(0.5),
        })
        .collect()
}

fn connected_components(n: usize, tets: &[[usize; 4]]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for t in tets {
        for k in 1..4 {
            let (a, b) = (find(&mut parent, t[0]), find(&mut parent, t[k]));
            parent[a] = b;
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

#[test]
fn single_gaussian_gives_nine_box_points() {
    let g = iso(Vector3::new(1.0, 2.0, 3.0), 1.0, 0.9);
    let grid = build_tet_grid(&[g.clone()]).unwrap();
    assert_eq!(grid.vertices.len(), 9);
    for (v, p) in grid.vertices.iter().zip(&grid.provenance) {
        let d = v - g.mean;
        match p[0].point {
            BoxPoint::Center => assert_eq!(d, Vector3::zeros()),
            BoxPoint::Corner(_) => assert!(d.iter().all(|x| (x.abs() - 3.0).abs() < 1e-12)),
        }
    }
    let vol: f64 = grid
        .tetrahedra
        .iter()
        .map(|t| {
            let v = t.map(|i| grid.vertices[i]);
            (v[1] - v[0]).cross(&(v[2] - v[0])).dot(&(v[3] - v[0])) / 6.0
        })
        .sum();
    assert!((vol - 216.0).abs() < 1e-9);

    let twice = build_tet_grid(&[g.clone(), g]).unwrap();
    assert_eq!(twice.vertices.len(), 9);
    assert!(twice.provenance.iter().all(|p| p.len() == 2));
}

#[test]
fn grid_is_delaunay() {
    for seed in 0..3 {
        let map = random_map(seed, 25);
        let grid = build_tet_grid(&map).unwrap();
        let v = &grid.vertices;
        for t in &grid.tetrahedra {
            let [a, b, c, d] = t.map(|i| v[i]);
            // Circumcenter from the 3×3 linear system.
            let m = nalgebra::Matrix3::from_rows(&[(b - a).transpose(), (c - a).transpose(), (d - a).transpose()]);
            let rhs = Vector3::new((b - a).norm_squared(), (c - a).norm_squared(), (d - a).norm_squared()) / 2.0;
            let Some(x) = m.lu().solve(&rhs) else { continue };
            let center = a + x;
            let r = x.norm();
            for (i, p) in v.iter().enumerate() {
                if t.contains(&i) {
                    continue;
                }
                assert!((p - center).norm() >= r - 1e-6 * r.max(1.0), "seed {seed}: vertex {i} inside circumsphere");
            }
            assert!((b - a).cross(&(c - a)).dot(&(d - a)) / 6.0 > MIN_TET_VOLUME);
        }
    }
}

#[test]
fn distant_gaussians_become_islands() {
    let map = vec![iso(Vector3::zeros(), 0.01, 0.9), iso(Vector3::new(1.0, 0.3, 0.2), 0.01, 0.9)];
    let grid = build_tet_grid(&map).unwrap();
    let bridging = |g: &TetGrid| {
        g.tetrahedra
            .iter()
            .filter(|t| {
                let ids: HashSet<usize> = t.iter().map(|&i| g.provenance[i][0].gaussian).collect();
                ids.len() > 1
            })
            .count()
    };
    assert!(bridging(&grid) > 0);
    let filtered = filter_tets(&grid, &map, EdgeScale::ThreeSigma);
    assert_eq!(bridging(&filtered), 0);
    let comps = connected_components(filtered.vertices.len(), &filtered.tetrahedra);
    let islands: HashSet<usize> = comps.iter().copied().collect();
    assert_eq!(islands.len(), 2);
}

#[test]
fn overlapping_gaussians_keep_every_tet() {
    let map = vec![iso(Vector3::zeros(), 0.1, 0.9), iso(Vector3::new(0.05, 0.02, 0.0), 0.12, 0.9)];
    let grid = build_tet_grid(&map).unwrap();
    assert_eq!(filter_tets(&grid, &map, EdgeScale::ThreeSigma).tetrahedra, grid.tetrahedra);
}

#[test]
fn touching_chain_stays_connected() {
    let map: Vec<GaussianPrimitive> = (0..8).map(|i| iso(Vector3::new(i as f64 * 0.5, 0.0, 0.0), 0.1, 0.9)).collect();
    let grid = build_tet_grid(&map).unwrap();
    let filtered = filter_tets(&grid, &map, EdgeScale::ThreeSigma);
    let comps = connected_components(filtered.vertices.len(), &filtered.tetrahedra);
    let set: HashSet<usize> = comps.iter().copied().collect();
    assert_eq!(set.len(), 1);
    // With raw scales the same chain falls apart.
    let raw = filter_tets(&grid, &map, EdgeScale::Raw);
    let comps = connected_components(raw.vertices.len(), &raw.tetrahedra);
    assert!(comps.iter().collect::<HashSet<_>>().len() > 1);
}

#[test]
fn vertex_opacity_examples() {
    let g = iso(Vector3::zeros(), 0.5, 0.99);
    let views = axis_views(Vector3::zeros(), 5.0);
    let grid = build_tet_grid(&[g.clone()]).unwrap();
    let grid = evaluate_vertex_opacity(&grid, &views, &[g.clone()]);
    for (v, o) in grid.vertices.iter().zip(&grid.opacity) {
        let brute = point_opacity(v, &views, &[g.clone()]).unwrap();
        assert_eq!(*o, brute);
        if *v == Vector3::zeros() {
            assert!(*o > 0.98);
        } else {
            assert!(*o < 1e-3);
        }
    }
    let far = Vector3::new(40.0, 40.0, 40.0);
    assert_eq!(point_opacity(&far, &views, &[g.clone()]).unwrap_or(0.0), 0.0);

    // Fewer views never lower the opacity.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let p = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let all = point_opacity(&p, &views, &[g.clone()]).unwrap();
        let some = point_opacity(&p, &views[..3], &[g.clone()]).unwrap_or(1.0);
        assert!(some >= all);
    }
}

fn single_tet(opacity: [f64; 4]) -> TetGrid {
    TetGrid {
        vertices: vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()],
        provenance: vec![vec![]; 4],
        tetrahedra: vec![[0, 1, 2, 3]],
        opacity: opacity.to_vec(),
    }
}

#[test]
fn marching_tetrahedra_examples() {
    let (mesh, _) = marching_tetrahedra(&single_tet([0.1, 0.2, 0.3, 0.4]), 0.5);
    assert!(mesh.triangles.is_empty() && mesh.vertices.is_empty());

    let (mesh, origins) = marching_tetrahedra(&single_tet([1.0, 0.0, 0.0, 0.0]), 0.5);
    assert_eq!(mesh.triangles.len(), 1);
    assert_eq!(mesh.vertices.len(), 3);
    for (v, o) in mesh.vertices.iter().zip(&origins) {
        assert_eq!(o.inside, 0);
        assert!((v.norm() - 0.5).abs() < 1e-15);
    }
    // Normal points away from the dense vertex.
    let [a, b, c] = mesh.triangles[0].map(|i| mesh.vertices[i]);
    assert!((b - a).cross(&(c - a)).dot(&Vector3::repeat(1.0)) > 0.0);

    let (mesh, _) = marching_tetrahedra(&single_tet([1.0, 1.0, 0.0, 0.0]), 0.5);
    assert_eq!(mesh.triangles.len(), 2);
    assert_eq!(mesh.vertices.len(), 4);
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| mesh.vertices[i]);
        let n = (b - a).cross(&(c - a));
        assert!(n.dot(&Vector3::new(-1.0, 0.0, 0.0)) < 0.0 || n.dot(&Vector3::new(0.0, 1.0, 1.0)) > 0.0);
    }
}

#[test]
fn every_case_is_closed_and_consistent() {
    // Sixteen inside/outside patterns on a two-tet grid sharing a face: the
    // shared crossing vertices are reused, and each triangle faces the
    // outside vertices.
    for mask in 0..16u32 {
        let op: Vec<f64> = (0..4).map(|k| if mask >> k & 1 == 1 { 0.9 } else { 0.1 }).collect();
        let grid = single_tet([op[0], op[1], op[2], op[3]]);
        let (mesh, origins) = marching_tetrahedra(&grid, 0.5);
        let inside = mask.count_ones();
        let expected = match inside {
            0 | 4 => 0,
            1 | 3 => 1,
            _ => 2,
        };
        assert_eq!(mesh.triangles.len(), expected, "mask {mask}");
        for (v, o) in mesh.vertices.iter().zip(&origins) {
            assert!(grid.opacity[o.inside] > 0.5 && grid.opacity[o.outside] <= 0.5);
            let mid = (grid.vertices[o.inside] + grid.vertices[o.outside]) / 2.0;
            assert!((v - mid).norm() < 1e-15);
        }
    }
}

fn sphere_setup() -> (Vec<GaussianPrimitive>, Vec<View>) {
    (vec![iso(Vector3::zeros(), 1.0, 0.95)], axis_views(Vector3::zeros(), 8.0))
}

#[test]
fn refined_sphere_matches_radial_oracle() {
    let (map, views) = sphere_setup();
    let cfg = ExtractionConfig::default();
    let out = extract_mesh(&map, &views, &cfg).unwrap();
    assert!(!out.mesh.vertices.is_empty());
    assert!(out.bracket_violations.is_empty());
    let analytic = (2.0 * (0.95f64 / 0.5).ln()).sqrt();
    let max_r = 3.0 * 3f64.sqrt();
    for v in &out.mesh.vertices {
        let u = v.normalize();
        // Dense radial sampling of the true point opacity.
        let steps = 256;
        let mut prev = (0.0, point_opacity(&Vector3::zeros(), &views, &map).unwrap());
        let mut oracle = None;
        for k in 1..=steps {
            let r = max_r * k as f64 / steps as f64;
            let o = point_opacity(&(u * r), &views, &map).unwrap();
            if prev.1 > 0.5 && o <= 0.5 {
                oracle = Some(prev.0 + (r - prev.0) * (prev.1 - 0.5) / (prev.1 - o));
                break;
            }
            prev = (r, o);
        }
        let oracle = oracle.expect("radial crossing");
        assert!((v.norm() - oracle).abs() < 0.02 * oracle, "{} vs {oracle}", v.norm());
        assert!((oracle - analytic).abs() < 0.01 * analytic);
    }

    // Without refinement the linear estimate is far off on this coarse grid.
    let coarse = extract_mesh(&map, &views, &ExtractionConfig { iterations: 0, ..cfg }).unwrap();
    let worst = coarse.mesh.vertices.iter().map(|v| (v.norm() - analytic).abs()).fold(0.0, f64::max);
    assert!(worst > 0.05);
}

#[test]
fn zero_iterations_leave_the_mesh_unchanged() {
    let (map, views) = sphere_setup();
    let grid = evaluate_vertex_opacity(&build_tet_grid(&map).unwrap(), &views, &map);
    let (mesh, origins) = marching_tetrahedra(&grid, 0.5);
    let refined = refine_level_set(&mesh, &origins, &grid, &map, &views, 0.5, 0);
    assert_eq!(refined.mesh, mesh);
}

#[test]
fn changed_map_flags_bracket_violations() {
    let (map, views) = sphere_setup();
    let grid = evaluate_vertex_opacity(&build_tet_grid(&map).unwrap(), &views, &map);
    let (mesh, origins) = marching_tetrahedra(&grid, 0.5);
    let faded = vec![iso(Vector3::zeros(), 1.0, 0.3)];
    let refined = refine_level_set(&mesh, &origins, &grid, &faded, &views, 0.5, 8);
    assert_eq!(refined.bracket_violations.len(), mesh.vertices.len());
    assert_eq!(refined.mesh.vertices, mesh.vertices);
}

fn blob() -> (Vec<GaussianPrimitive>, Vec<View>) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let map = (0..30)
        .map(|_| {
            let mean = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
            iso(mean, rng.gen_range(0.15..0.25), 0.9)
        })
        .collect();
    (map, axis_views(Vector3::zeros(), 4.0))
}

#[test]
fn mesh_has_no_dangling_vertices_and_is_deterministic() {
    let (map, views) = blob();
    let a = extract_mesh(&map, &views, &ExtractionConfig::default()).unwrap();
    let b = extract_mesh(&map, &views, &ExtractionConfig::default()).unwrap();
    assert_eq!(a, b);
    let mut used = vec![false; a.mesh.vertices.len()];
    for t in &a.mesh.triangles {
        for &i in t {
            used[i] = true;
        }
        let [p, q, r] = t.map(|i| a.mesh.vertices[i]);
        assert!((q - p).cross(&(r - p)).norm() / 2.0 > MIN_TRIANGLE_AREA);
    }
    assert!(used.iter().all(|u| *u));
    assert!(a.mesh.signed_volume() > 0.0);
}

#[test]
fn higher_level_encloses_less_volume() {
    let (map, views) = sphere_setup();
    let volumes: Vec<f64> = [0.2, 0.35, 0.5, 0.65, 0.8]
        .iter()
        .map(|&tau| {
            let cfg = ExtractionConfig { tau, ..Default::default() };
            extract_mesh(&map, &views, &cfg).unwrap().mesh.signed_volume()
        })
        .collect();
    assert!(volumes[0] > 0.0);
    for w in volumes.windows(2) {
        assert!(w[1] <= w[0], "{volumes:?}");
    }
}

/// Möller–Trumbore; returns the ray parameter.
fn hit(o: &Vector3<f64>, d: &Vector3<f64>, tri: [Vector3<f64>; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let s = o - tri[0];
    let u = s.dot(&p) / det;
    let q = s.cross(&e1);
    let v = d.dot(&q) / det;
    if u < 0.0 || v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&q) / det)
}

#[test]
fn surface_separates_inside_from_outside() {
    let (map, views) = blob();
    let out = extract_mesh(&map, &views, &ExtractionConfig::default()).unwrap();
    let m = &out.mesh;
    let edge = m
        .triangles
        .iter()
        .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
        .map(|(a, b)| (m.vertices[a] - m.vertices[b]).norm())
        .fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    assert!(point_opacity(&Vector3::zeros(), &views, &map).unwrap() > 0.5);
    for _ in 0..40 {
        let dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
        let origin = dir * 3.0;
        let toward = -dir;
        let mut hits: Vec<f64> = m
            .triangles
            .iter()
            .filter_map(|t| hit(&origin, &toward, t.map(|i| m.vertices[i])))
            .filter(|&t| t > 0.0 && t < 3.0)
            .collect();
        hits.sort_by(f64::total_cmp);
        assert!(!hits.is_empty());
        // First crossing of the true field, by dense sampling.
        let n = 3000;
        let truth = (0..=n)
            .map(|k| 3.0 * k as f64 / n as f64)
            .find(|&t| point_opacity(&(origin + toward * t), &views, &map).unwrap() > 0.5)
            .unwrap();
        worst = worst.max((hits[0] - truth).abs());
    }
    assert!(worst < 0.25 * edge, "worst {worst}, longest edge {edge}");
}
