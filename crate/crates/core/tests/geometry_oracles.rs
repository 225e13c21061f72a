use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use softgen::geometry::{compose, inverse, kabsch_fit, orthonormalize, rotation_angle_between, Mat3, Pose, Rotation, Vec3};

fn rot_z(deg: f64) -> Rotation {
    Rotation::from_axis_angle(&Vec3::z_axis(), deg.to_radians())
}

#[test]
fn inverse_composes_to_identity() {
    let p = Pose::new(Vec3::new(1.0, 0.0, 0.0), rot_z(90.0));
    let q = inverse(&p);
    assert!((q.position - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    assert!(rotation_angle_between(&q.rotation, &rot_z(-90.0)) < 1e-9);
    for c in [compose(&p, &q), compose(&q, &p)] {
        assert!(c.position.norm() < 1e-12);
        assert!((c.rotation.matrix() - Mat3::identity()).norm() < 1e-12);
    }
}

// brute force over a 3-degree Euler grid, then the best cell refined at 0.25 degrees
fn nearest_rotation_by_search(m: &Mat3) -> Rotation {
    let score = |r: &Rotation| (r.matrix() - m).norm_squared();
    let search = |center: (f64, f64, f64), half: f64, step: f64| {
        let n = (half / step).round() as i32;
        let mut best = (f64::INFINITY, center);
        for i in -n..=n {
            for j in -n..=n {
                for k in -n..=n {
                    let e = (center.0 + i as f64 * step, center.1 + j as f64 * step, center.2 + k as f64 * step);
                    let s = score(&Rotation::from_euler_angles(e.0, e.1, e.2));
                    if s < best.0 {
                        best = (s, e);
                    }
                }
            }
        }
        best.1
    };
    let coarse = 3f64.to_radians();
    let mut best = (f64::INFINITY, (0.0, 0.0, 0.0));
    let steps = (std::f64::consts::PI / coarse).round() as i32;
    for i in -steps..steps {
        for j in -(steps / 2)..=(steps / 2) {
            for k in -steps..steps {
                let e = (i as f64 * coarse, j as f64 * coarse, k as f64 * coarse);
                let s = score(&Rotation::from_euler_angles(e.0, e.1, e.2));
                if s < best.0 {
                    best = (s, e);
                }
            }
        }
    }
    let fine = search(best.1, coarse, 0.25f64.to_radians());
    Rotation::from_euler_angles(fine.0, fine.1, fine.2)
}

#[test]
fn orthonormalize_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0;
    while checked < 5 {
        let m = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        if m.determinant().abs() < 0.1 {
            continue;
        }
        checked += 1;
        let r = orthonormalize(&m).unwrap();
        let oracle = nearest_rotation_by_search(&m);
        let angle = rotation_angle_between(&r, &oracle);
        assert!(angle <= 0.05, "angle {angle} for {m}");
        assert!((r.matrix().determinant() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn kabsch_recovers_noisy_rigid_transforms() {
    let noise = Normal::new(0.0, 0.01).unwrap();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: Vec<Vec3> = (0..30)
            .map(|_| Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect();
        let truth = Pose::new(
            Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            Rotation::from_euler_angles(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0)),
        );
        let tgt: Vec<Vec3> = src
            .iter()
            .map(|p| truth.transform_point(p) + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)))
            .collect();
        let fit = kabsch_fit(&src, &tgt).unwrap();
        assert!(rotation_angle_between(&fit.rotation, &truth.rotation) <= 0.05, "seed {seed}");
        assert!((fit.position - truth.position).norm() <= 0.02, "seed {seed}");
    }
}
