use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use softgen::geometry::{Mat3, Pose, Rotation, Vec3};
use softgen::registration::{fit_tps, fit_tps_rpm, rigid_register, DeformableConfig, RpmParams, WarpField};
use softgen::warp::transform_pose;

fn cloud(seed: u64, n: usize, half: f64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Vec3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half)))
        .collect()
}

fn cfg(nodes: Vec<Vec3>) -> DeformableConfig {
    DeformableConfig::new("object", nodes)
}

fn rot_z(deg: f64) -> Rotation {
    Rotation::from_axis_angle(&Vec3::z_axis(), deg.to_radians())
}

// side conditions recomputed from the raw field
fn side_conditions(f: &WarpField) -> f64 {
    let mut sum = Vec3::zeros();
    let mut moment = Mat3::zeros();
    for (w, c) in f.rbf_weights.iter().zip(&f.control_points) {
        sum += w;
        for r in 0..3 {
            for k in 0..3 {
                moment[(r, k)] += w[r] * c[k];
            }
        }
    }
    sum.abs().max().max(moment.abs().max())
}

#[test]
fn exact_interpolation_at_zero_lambda() {
    for seed in 0..20 {
        let src = cloud(seed, 20, 0.1);
        let tgt: Vec<Vec3> = src.iter().zip(cloud(seed + 100, 20, 0.02)).map(|(a, d)| a + d).collect();
        let r = fit_tps(&cfg(src.clone()), &cfg(tgt.clone()), 0.0).unwrap();
        for (a, b) in src.iter().zip(&tgt) {
            assert!((r.field.eval(a) - b).norm() <= 1e-8, "seed {seed}");
        }
        assert!(side_conditions(&r.field) <= 1e-8);
    }
}

#[test]
fn rotation_about_z_is_reproduced_on_probe_grid() {
    let src = cloud(3, 30, 0.1);
    let rot = rot_z(40.0);
    let tgt: Vec<Vec3> = src.iter().map(|p| rot * p).collect();
    let r = fit_tps(&cfg(src), &cfg(tgt), 0.1).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            for k in 0..5 {
                let x = Vec3::new(i as f64, j as f64, k as f64) * 0.03 - Vec3::repeat(0.06);
                assert!((r.field.eval(&x) - rot * x).norm() <= 1e-6);
            }
        }
    }
    assert!(r.cost <= 1e-9);
    assert!(r.bending_energy <= 1e-9);
}

#[test]
fn looser_targets_cost_more() {
    let normal = |s: f64| Normal::new(0.0, s).unwrap();
    let mut ordered = 0;
    for seed in 0..100u64 {
        let src = cloud(seed, 25, 0.1);
        let noisy = |sigma: f64| {
            // the same noise draw, scaled
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let n = normal(1.0);
            src.iter()
                .map(|p| p + Vec3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng)) * sigma)
                .collect::<Vec<_>>()
        };
        let tight = fit_tps(&cfg(src.clone()), &cfg(noisy(0.01)), 0.1).unwrap().cost;
        let loose = fit_tps(&cfg(src.clone()), &cfg(noisy(0.05)), 0.1).unwrap().cost;
        if tight < loose {
            ordered += 1;
        }
    }
    assert!(ordered >= 95, "{ordered}/100 ordered");
}

#[test]
fn rigid_cannot_bend_a_rope() {
    let straight: Vec<Vec3> = (0..20).map(|i| Vec3::new(i as f64 * 0.02, 0.0, 0.0)).collect();
    let pivot = straight[9];
    let bent: Vec<Vec3> = straight
        .iter()
        .enumerate()
        .map(|(i, p)| if i > 9 { pivot + rot_z(90.0) * (p - pivot) } else { *p })
        .collect();
    let (_, rigid) = rigid_register(&cfg(straight.clone()), &cfg(bent.clone())).unwrap();
    let tps = fit_tps(&cfg(straight), &cfg(bent), 0.1).unwrap();
    assert!(rigid > tps.cost, "rigid {rigid} tps {}", tps.cost);
}

#[test]
fn warped_grasp_follows_the_grasped_node() {
    let spacing = 0.02;
    let straight: Vec<Vec3> = (0..20).map(|i| Vec3::new(i as f64 * spacing, 0.0, 0.0)).collect();
    let pivot = straight[9];
    let bent: Vec<Vec3> = straight
        .iter()
        .enumerate()
        .map(|(i, p)| if i > 9 { pivot + rot_z(60.0) * (p - pivot) } else { *p })
        .collect();
    let r = fit_tps(&cfg(straight.clone()), &cfg(bent.clone()), 0.1).unwrap();
    for grasped in [0, 5, 14, 19] {
        let pose = Pose::new(straight[grasped] + Vec3::new(0.0, 0.0, 0.005), Rotation::identity());
        let moved = transform_pose(&r.field, &pose).unwrap();
        let d = (moved.position - bent[grasped]).norm();
        assert!(d <= spacing, "node {grasped}: {d}");
    }
}

#[test]
fn rpm_recovers_a_permutation() {
    let src = cloud(11, 20, 0.1);
    let mut perm: Vec<usize> = (0..src.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    // tgt[perm[i]] = src[i]
    let mut tgt = vec![Vec3::zeros(); src.len()];
    for (i, p) in src.iter().enumerate() {
        tgt[perm[i]] = *p;
    }
    let r = fit_tps_rpm(&cfg(src), &cfg(tgt), &RpmParams::default()).unwrap();
    assert!(r.residual <= 1e-3, "{}", r.residual);
    let m = r.correspondence.expect("soft assignment");
    for (i, row) in m.iter().enumerate() {
        let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(best, perm[i], "row {i}");
    }
}

#[test]
fn rpm_follows_a_rotation_with_a_bump() {
    let src = cloud(21, 30, 0.1);
    let rot = rot_z(20.0);
    let bump = |x: &Vec3| 0.02 * (-(x.norm_squared()) / (2.0 * 0.05f64.powi(2))).exp();
    let tgt: Vec<Vec3> = src.iter().map(|p| rot * p + Vec3::z() * bump(p)).collect();
    let r = fit_tps_rpm(&cfg(src), &cfg(tgt), &RpmParams::default()).unwrap();
    assert!(r.residual <= 5e-3, "{}", r.residual);
}

#[test]
fn rpm_handles_unequal_counts() {
    let src = cloud(31, 25, 0.1);
    let tgt: Vec<Vec3> = src.iter().take(20).copied().collect();
    let r = fit_tps_rpm(&cfg(src), &cfg(tgt), &RpmParams::default()).unwrap();
    assert!(r.residual <= 1e-3, "{}", r.residual);
}

#[test]
fn rigid_pair_has_no_bending() {
    let src = cloud(41, 15, 0.1);
    let t = Pose::new(Vec3::new(0.1, -0.2, 0.05), Rotation::from_euler_angles(0.3, -0.2, 1.1));
    let tgt: Vec<Vec3> = src.iter().map(|p| t.transform_point(p)).collect();
    let r = fit_tps(&cfg(src), &cfg(tgt), 0.1).unwrap();
    assert!(r.bending_energy <= 1e-9);
    assert!(r.cost <= 1e-9);
}

#[test]
fn jacobian_matches_central_differences() {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let src = cloud(seed, 12, 0.1);
        let tgt: Vec<Vec3> = src.iter().zip(cloud(seed + 50, 12, 0.03)).map(|(a, d)| a + d).collect();
        let f = fit_tps(&cfg(src.clone()), &cfg(tgt), 0.01).unwrap().field;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let mut probes = 0;
        while probes < 50 {
            let x = Vec3::new(rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
            if f.control_points.iter().any(|c| (x - c).norm() < 2.0 * f.kernel_epsilon.max(h)) {
                continue;
            }
            probes += 1;
            let j = f.jacobian(&x);
            let mut fd = Mat3::zeros();
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = h;
                fd.set_column(k, &((f.eval(&(x + e)) - f.eval(&(x - e))) / (2.0 * h)));
            }
            worst = worst.max((j - fd).norm() / fd.norm().max(1e-12));
        }
    }
    assert!(worst <= 1e-4, "{worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_fit_meets_side_conditions(seed in 0u64..10_000, n in 5usize..30, lambda in 0.0f64..1.0) {
        let src = cloud(seed, n, 0.1);
        let tgt: Vec<Vec3> = src.iter().zip(cloud(seed + 1, n, 0.05)).map(|(a, d)| a + d).collect();
        let r = fit_tps(&cfg(src), &cfg(tgt), lambda).unwrap();
        prop_assert!(side_conditions(&r.field) <= 1e-8);
        prop_assert!(r.bending_energy >= 0.0);
        prop_assert!(r.cost.is_finite());
    }

    #[test]
    fn translation_is_free(seed in 0u64..10_000, dx in -1.0f64..1.0, dy in -1.0f64..1.0, dz in -1.0f64..1.0) {
        let src = cloud(seed, 12, 0.1);
        let d = Vec3::new(dx, dy, dz);
        let tgt: Vec<Vec3> = src.iter().map(|p| p + d).collect();
        let r = fit_tps(&cfg(src), &cfg(tgt), 0.1).unwrap();
        let x = Vec3::new(0.3, -0.7, 2.0);
        prop_assert!((r.field.eval(&x) - (x + d)).norm() <= 1e-8);
        prop_assert!(r.bending_energy <= 1e-9);
    }
}
