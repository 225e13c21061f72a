use std::ffi::{CStr, CString};
use std::ptr;

use softgen_ffi::*;

fn cube_corners() -> Vec<f64> {
    let mut v = Vec::new();
    for x in [0.0, 1.0] {
        for y in [0.0, 1.0] {
            for z in [0.0, 1.0] {
                v.extend([x, y, z]);
            }
        }
    }
    v
}

fn last_error() -> String {
    let p = sg_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn translation_field_round_trip() {
    let src = cube_corners();
    let tgt: Vec<f64> = src.chunks(3).flat_map(|c| [c[0] + 1.0, c[1], c[2] - 0.5]).collect();
    let mut field = ptr::null_mut();
    unsafe {
        assert_eq!(sg_fit_tps(src.as_ptr(), tgt.as_ptr(), 8, 0.1, &mut field), SgStatus::Ok);
        let mut y = [0.0; 3];
        assert_eq!(sg_warp_eval(field, [0.3, 2.0, -1.0].as_ptr(), y.as_mut_ptr()), SgStatus::Ok);
        for (a, b) in y.iter().zip([1.3, 2.0, -1.5]) {
            assert!((a - b).abs() < 1e-9, "{y:?}");
        }
        let mut j = [0.0; 9];
        assert_eq!(sg_warp_jacobian(field, [0.5, 0.5, 0.5].as_ptr(), j.as_mut_ptr()), SgStatus::Ok);
        for (k, v) in j.iter().enumerate() {
            let id = if k % 4 == 0 { 1.0 } else { 0.0 };
            assert!((v - id).abs() < 1e-9, "{j:?}");
        }
        let (mut cost, mut bend) = (f64::NAN, f64::NAN);
        assert_eq!(sg_warp_cost(field, &mut cost, &mut bend), SgStatus::Ok);
        assert!(cost.abs() < 1e-12 && bend.abs() < 1e-12);
        let pose = SgPose {
            position: [0.5, 0.5, 0.5],
            quaternion: [1.0, 0.0, 0.0, 0.0],
        };
        let mut moved = SgPose::default();
        assert_eq!(sg_warp_transform_pose(field, &pose, &mut moved), SgStatus::Ok);
        assert!((moved.position[0] - 1.5).abs() < 1e-9);
        assert!((moved.quaternion[0] - 1.0).abs() < 1e-9);
        sg_warp_free(field);
    }
}

#[test]
fn shape_mismatch_reports_code_and_message() {
    let src = cube_corners();
    let mut field = ptr::null_mut();
    let status = unsafe { sg_fit_tps_rpm(src.as_ptr(), 8, src.as_ptr(), 0, 0.1, &mut field) };
    assert_ne!(status, SgStatus::Ok);
    assert!(field.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn null_pointers_are_rejected() {
    let mut field = ptr::null_mut();
    let status = unsafe { sg_fit_tps(ptr::null(), ptr::null(), 4, 0.1, &mut field) };
    assert_eq!(status, SgStatus::NullPointer);
    assert!(last_error().contains("src"));
    let status = unsafe { sg_warp_eval(ptr::null(), [0.0; 3].as_ptr(), [0.0; 3].as_mut_ptr()) };
    assert_eq!(status, SgStatus::NullPointer);
    unsafe { sg_warp_free(ptr::null_mut()) };
}

#[test]
fn orthonormalize_and_kabsch() {
    let m = [2.0, 0.0, 0.0, 0.0, 0.0, -3.0, 0.0, 0.5, 0.0];
    let mut r = [0.0; 9];
    assert_eq!(unsafe { sg_orthonormalize(m.as_ptr(), r.as_mut_ptr()) }, SgStatus::Ok);
    let expected = [1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0];
    for (a, b) in r.iter().zip(expected) {
        assert!((a - b).abs() < 1e-9, "{r:?}");
    }
    let zero = [0.0; 9];
    assert_eq!(unsafe { sg_orthonormalize(zero.as_ptr(), r.as_mut_ptr()) }, SgStatus::Degenerate);

    let src = cube_corners();
    // quarter turn about z, then shift
    let tgt: Vec<f64> = src.chunks(3).flat_map(|c| [-c[1] + 0.2, c[0], c[2] + 0.1]).collect();
    let mut pose = SgPose::default();
    assert_eq!(unsafe { sg_kabsch_fit(src.as_ptr(), tgt.as_ptr(), 8, &mut pose) }, SgStatus::Ok);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let q = [h, 0.0, 0.0, h];
    for (a, b) in pose.quaternion.iter().zip(q) {
        assert!((a - b).abs() < 1e-9, "{pose:?}");
    }
    for (a, b) in pose.position.iter().zip([0.2, 0.0, 0.1]) {
        assert!((a - b).abs() < 1e-9, "{pose:?}");
    }
}

#[test]
fn world_lifecycle() {
    let task = CString::new("cube_stack").unwrap();
    let mut world = ptr::null_mut();
    unsafe {
        assert_eq!(sg_world_reset(task.as_ptr(), 5, &mut world), SgStatus::Ok);
        let object = CString::new("cube_a").unwrap();
        let mut count = 0usize;
        let status = sg_world_observe(world, object.as_ptr(), ptr::null_mut(), 0, &mut count);
        assert_eq!(status, SgStatus::BufferTooSmall);
        assert!(count > 0);
        let mut before = vec![0.0; 3 * count];
        assert_eq!(
            sg_world_observe(world, object.as_ptr(), before.as_mut_ptr(), count, &mut count),
            SgStatus::Ok
        );
        let mut success = true;
        assert_eq!(sg_world_success(world, &mut success), SgStatus::Ok);
        assert!(!success);

        let mut home = SgPose::default();
        assert_eq!(sg_world_gripper_pose(world, &mut home), SgStatus::Ok);
        for _ in 0..10 {
            assert_eq!(sg_world_step(world, &home, 0), SgStatus::Ok);
        }
        let mut after = vec![0.0; 3 * count];
        sg_world_observe(world, object.as_ptr(), after.as_mut_ptr(), count, &mut count);
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(sg_world_step(world, &home, 7), SgStatus::InvalidInput);

        let missing = CString::new("towel").unwrap();
        let status = sg_world_observe(world, missing.as_ptr(), ptr::null_mut(), 0, &mut count);
        assert_eq!(status, SgStatus::UnknownName);
        sg_world_free(world);
    }
    let bad = CString::new("juggling").unwrap();
    let mut world = ptr::null_mut();
    assert_eq!(unsafe { sg_world_reset(bad.as_ptr(), 0, &mut world) }, SgStatus::UnknownName);
    assert!(last_error().contains("juggling"));
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/softgen.h");
    let source = include_str!("../src/lib.rs");
    let exports: Vec<&str> = source
        .lines()
        .filter_map(|l| l.trim().strip_prefix("pub unsafe extern \"C\" fn ").or_else(|| l.trim().strip_prefix("pub extern \"C\" fn ")))
        .map(|l| l.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 14, "{exports:?}");
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    for ty in ["SgStatus", "SgPose", "SgWarpField", "SgWorld"] {
        assert!(header.contains(ty));
    }
}
