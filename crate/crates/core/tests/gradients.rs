//! Analytic loss gradients against central finite differences.

use fgo_core::optim::gradcheck::{check_gradients, GradCheckReport, GradCheckScene};
use fgo_core::optim::{normal_consistency_loss, total_loss, LossWeights};
use fgo_core::render::render_full;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-3;

#[test]
fn analytic_gradients_match_finite_differences() {
    let weights = LossWeights::new(100.0, 0.05, 0.2);
    let mut report = GradCheckReport::default();
    for seed in 0..20u64 {
        let scene = GradCheckScene::random(seed, 10, 16);
        report.merge(check_gradients(&scene, &weights, H, REL_TOL));
    }
    eprintln!("{report:?}");
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    assert_eq!(report.distortion_opacity_leak, 0.0);
    assert!(report.skipped * 50 <= report.checked, "too many non-smooth samples: {report:?}");
}

#[test]
fn distortion_value_depends_on_opacity() {
    let scene = GradCheckScene::random(3, 10, 16);
    let weights = LossWeights::new(100.0, 0.05, 0.2);
    let eval = |params: &[fgo_core::optim::GaussianParams]| {
        let map: Vec<_> = params.iter().map(|p| p.to_primitive()).collect();
        let fr = render_full(&scene.camera, &scene.pose, &map);
        total_loss(&fr, &scene.camera, &scene.pose, &scene.target, &weights).unwrap().distortion
    };
    let before = eval(&scene.params);
    let mut p = scene.params.clone();
    for q in p.iter_mut() {
        q.logit_opacity += 0.5;
    }
    let after = eval(&p);
    assert!(before > 0.0 && (after - before).abs() > 1e-6);
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

    #[test]
    fn loss_terms_are_bounded(seed in 0u64..1_000_000, nx in -1.0f64..1.0, ny in -1.0f64..1.0, nz in -1.0f64..1.0) {
        let scene = GradCheckScene::random(seed, 10, 16);
        let weights = LossWeights::new(1000.0, 0.05, 0.2);
        let map: Vec<_> = scene.params.iter().map(|p| p.to_primitive()).collect();
        let fr = render_full(&scene.camera, &scene.pose, &map);
        let l = total_loss(&fr, &scene.camera, &scene.pose, &scene.target, &weights).unwrap();
        proptest::prop_assert!(l.color >= 0.0 && l.distortion >= 0.0 && l.normal >= 0.0);
        let sum = l.color + weights.alpha * l.distortion + weights.beta * l.normal;
        proptest::prop_assert!((l.total - sum).abs() <= 1e-12 * sum.max(1.0));

        let big_n = nalgebra::Vector3::new(nx, ny, nz);
        proptest::prop_assume!(big_n.norm() > 1e-3);
        let big_n = big_n.normalize();
        for (s, ns) in fr.samples.iter().zip(&fr.gaussian_normals) {
            let ln = normal_consistency_loss(std::slice::from_ref(s), std::slice::from_ref(ns), &[big_n]);
            let mass: f64 = s.contributions.iter().map(|c| c.weight).sum();
            proptest::prop_assert!(ln <= 2.0 * mass + 1e-12, "{ln} > 2 * {mass}");
        }
    }
}
