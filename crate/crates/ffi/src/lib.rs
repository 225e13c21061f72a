//! C interface to the softgen warp fields, geometry helpers and simulator.
//!
//! Every function returns an [`SgStatus`]; on failure a description is
//! available from [`sg_last_error_message`] on the same thread. Objects are
//! handed out as opaque pointers and must be released with the matching
//! `_free` function. Points are packed as `x, y, z` triples and 3×3 matrices
//! are row-major. Quaternions are `w, x, y, z`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use softgen::geometry::{kabsch_fit, orthonormalize, Mat3, Pose, Vec3};
use softgen::registration::{fit_tps, fit_tps_rpm, DeformableConfig, RegistrationResult, RpmParams};
use softgen::simulator::World;
use softgen::tasks::{task_by_id, TaskSpec};
use softgen::warp::{transform_pose, GripperCommand, TimedAction};
use softgen::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    ShapeMismatch = 3,
    Degenerate = 4,
    NonConvergence = 5,
    NumericalBlowup = 6,
    UnknownName = 7,
    BufferTooSmall = 8,
    Panic = 9,
    Other = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SgPose {
    pub position: [f64; 3],
    pub quaternion: [f64; 4],
}

/// A fitted warp field together with its fit statistics.
pub struct SgWarpField(RegistrationResult);

/// A simulated scene of one built-in task.
pub struct SgWorld {
    world: World,
    spec: TaskSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SgStatus {
    match e {
        Error::ShapeMismatch { .. } => SgStatus::ShapeMismatch,
        Error::DegenerateInput(_) | Error::DegenerateMatrix(_) => SgStatus::Degenerate,
        Error::NonConvergence(_) => SgStatus::NonConvergence,
        Error::NumericalBlowup { .. } => SgStatus::NumericalBlowup,
        Error::UnknownObject(_) | Error::UnknownTask(_) => SgStatus::UnknownName,
        Error::InvalidInput(_) => SgStatus::InvalidInput,
        _ => SgStatus::Other,
    }
}

struct Fail(SgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SgStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SgStatus::Panic
        }
    }
}

fn null(name: &str) -> Fail {
    Fail(SgStatus::NullPointer, format!("`{name}` is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SgStatus::InvalidInput, format!("`{name}` is not UTF-8")))
}

unsafe fn points(p: *const f64, n: usize, name: &str) -> Result<Vec<Vec3>, Fail> {
    let flat = slice(p, n.checked_mul(3).ok_or_else(|| Fail(SgStatus::InvalidInput, "length overflow".into()))?, name)?;
    Ok(flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}

unsafe fn vec3(p: *const f64, name: &str) -> Result<Vec3, Fail> {
    let s = slice(p, 3, name)?;
    Ok(Vec3::new(s[0], s[1], s[2]))
}

fn write_mat(m: &Mat3, dst: &mut [f64]) {
    for r in 0..3 {
        for c in 0..3 {
            dst[3 * r + c] = m[(r, c)];
        }
    }
}

fn to_pose(p: &SgPose) -> Result<Pose, Fail> {
    Ok(Pose::from_quaternion(Vec3::from(p.position), p.quaternion)?)
}

fn from_pose(p: &Pose) -> SgPose {
    SgPose {
        position: [p.position.x, p.position.y, p.position.z],
        quaternion: p.quaternion(),
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Fits a thin-plate-spline field mapping `src` onto `tgt` (`n` nodes each).
///
/// # Safety
/// `src` and `tgt` must point to `3 * n` doubles; `out_field` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_fit_tps(
    src: *const f64,
    tgt: *const f64,
    n: usize,
    lambda: f64,
    out_field: *mut *mut SgWarpField,
) -> SgStatus {
    guard(|| {
        let dst = out(out_field, "out_field")?;
        let s = DeformableConfig::new("object", points(src, n, "src")?);
        let t = DeformableConfig::new("object", points(tgt, n, "tgt")?);
        let result = fit_tps(&s, &t, lambda)?;
        *dst = Box::into_raw(Box::new(SgWarpField(result)));
        Ok(())
    })
}

/// Like [`sg_fit_tps`] with unknown correspondence: `src` has `n` and `tgt`
/// has `m` points.
///
/// # Safety
/// `src` and `tgt` must point to `3 * n` and `3 * m` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_fit_tps_rpm(
    src: *const f64,
    n: usize,
    tgt: *const f64,
    m: usize,
    lambda: f64,
    out_field: *mut *mut SgWarpField,
) -> SgStatus {
    guard(|| {
        let dst = out(out_field, "out_field")?;
        let s = DeformableConfig::new("object", points(src, n, "src")?);
        let t = DeformableConfig::new("object", points(tgt, m, "tgt")?);
        let params = RpmParams {
            lambda,
            ..RpmParams::default()
        };
        let result = fit_tps_rpm(&s, &t, &params)?;
        *dst = Box::into_raw(Box::new(SgWarpField(result)));
        Ok(())
    })
}

/// # Safety
/// `field` must come from a fit function and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sg_warp_free(field: *mut SgWarpField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// # Safety
/// `x` and `out_y` must point to 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_warp_eval(field: *const SgWarpField, x: *const f64, out_y: *mut f64) -> SgStatus {
    guard(|| {
        let f = field.as_ref().ok_or_else(|| null("field"))?;
        let y = f.0.field.eval(&vec3(x, "x")?);
        let dst = std::slice::from_raw_parts_mut(out(out_y, "out_y")?, 3);
        dst.copy_from_slice(y.as_slice());
        Ok(())
    })
}

/// Row-major Jacobian of the field at `x`.
///
/// # Safety
/// `x` must point to 3 doubles and `out_j` to 9.
#[no_mangle]
pub unsafe extern "C" fn sg_warp_jacobian(field: *const SgWarpField, x: *const f64, out_j: *mut f64) -> SgStatus {
    guard(|| {
        let f = field.as_ref().ok_or_else(|| null("field"))?;
        let j = f.0.field.jacobian(&vec3(x, "x")?);
        write_mat(&j, std::slice::from_raw_parts_mut(out(out_j, "out_j")?, 9));
        Ok(())
    })
}

/// # Safety
/// `pose` and `out_pose` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sg_warp_transform_pose(
    field: *const SgWarpField,
    pose: *const SgPose,
    out_pose: *mut SgPose,
) -> SgStatus {
    guard(|| {
        let f = field.as_ref().ok_or_else(|| null("field"))?;
        let p = to_pose(pose.as_ref().ok_or_else(|| null("pose"))?)?;
        let dst = out(out_pose, "out_pose")?;
        *dst = from_pose(&transform_pose(&f.0.field, &p)?);
        Ok(())
    })
}

/// Registration cost and bending energy of the fit. Either output may be null.
///
/// # Safety
/// `field` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sg_warp_cost(field: *const SgWarpField, out_cost: *mut f64, out_bending: *mut f64) -> SgStatus {
    guard(|| {
        let f = field.as_ref().ok_or_else(|| null("field"))?;
        if let Some(c) = out_cost.as_mut() {
            *c = f.0.cost;
        }
        if let Some(b) = out_bending.as_mut() {
            *b = f.0.bending_energy;
        }
        Ok(())
    })
}

/// Nearest rotation (Frobenius norm) to a row-major 3×3 matrix.
///
/// # Safety
/// `m` and `out_r` must point to 9 doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_orthonormalize(m: *const f64, out_r: *mut f64) -> SgStatus {
    guard(|| {
        let s = slice(m, 9, "m")?;
        let mat = Mat3::from_row_slice(s);
        let r = orthonormalize(&mat)?;
        write_mat(r.matrix(), std::slice::from_raw_parts_mut(out(out_r, "out_r")?, 9));
        Ok(())
    })
}

/// Least-squares rigid transform taking `src` onto `tgt`.
///
/// # Safety
/// `src` and `tgt` must point to `3 * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_kabsch_fit(src: *const f64, tgt: *const f64, n: usize, out_pose: *mut SgPose) -> SgStatus {
    guard(|| {
        let dst = out(out_pose, "out_pose")?;
        let pose = kabsch_fit(&points(src, n, "src")?, &points(tgt, n, "tgt")?)?;
        *dst = from_pose(&pose);
        Ok(())
    })
}

/// Samples the initial scene of built-in task `task_id`.
///
/// # Safety
/// `task_id` must be a NUL-terminated string; `out_world` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_world_reset(task_id: *const c_char, seed: u64, out_world: *mut *mut SgWorld) -> SgStatus {
    guard(|| {
        let dst = out(out_world, "out_world")?;
        let spec = task_by_id(read_str(task_id, "task_id")?)?;
        let world = spec.sample_world(seed);
        *dst = Box::into_raw(Box::new(SgWorld { world, spec }));
        Ok(())
    })
}

/// # Safety
/// `world` must come from [`sg_world_reset`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sg_world_free(world: *mut SgWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Advances one step with the gripper commanded to `pose`; `closed` is 0 or 1.
///
/// # Safety
/// `world` and `pose` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sg_world_step(world: *mut SgWorld, pose: *const SgPose, closed: u8) -> SgStatus {
    guard(|| {
        let w = world.as_mut().ok_or_else(|| null("world"))?;
        let p = to_pose(pose.as_ref().ok_or_else(|| null("pose"))?)?;
        let g = GripperCommand::from_u8(closed)?;
        let t = w.world.step_count;
        w.world.step(&TimedAction::new(t, p, g))?;
        Ok(())
    })
}

/// Copies the node positions of `object_id` into `out_nodes`.
///
/// The node count is always written to `out_count`. When `capacity` (in
/// nodes) is too small nothing is copied and `BufferTooSmall` is returned, so
/// a call with `capacity = 0` queries the size.
///
/// # Safety
/// `out_nodes` must have room for `3 * capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_world_observe(
    world: *const SgWorld,
    object_id: *const c_char,
    out_nodes: *mut f64,
    capacity: usize,
    out_count: *mut usize,
) -> SgStatus {
    guard(|| {
        let w = world.as_ref().ok_or_else(|| null("world"))?;
        let cfg = w.world.observe(read_str(object_id, "object_id")?)?;
        *out(out_count, "out_count")? = cfg.len();
        if capacity < cfg.len() {
            return Err(Fail(
                SgStatus::BufferTooSmall,
                format!("object has {} nodes, buffer holds {capacity}", cfg.len()),
            ));
        }
        if out_nodes.is_null() {
            return Err(null("out_nodes"));
        }
        let dst = std::slice::from_raw_parts_mut(out_nodes, 3 * cfg.len());
        for (chunk, p) in dst.chunks_exact_mut(3).zip(&cfg.nodes) {
            chunk.copy_from_slice(p.as_slice());
        }
        Ok(())
    })
}

/// Evaluates the task's success predicate on the current state.
///
/// # Safety
/// `world` must be valid and `out_success` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_world_success(world: *const SgWorld, out_success: *mut bool) -> SgStatus {
    guard(|| {
        let w = world.as_ref().ok_or_else(|| null("world"))?;
        *out(out_success, "out_success")? = w.spec.success(&w.world);
        Ok(())
    })
}

/// Current gripper pose.
///
/// # Safety
/// `world` must be valid and `out_pose` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_world_gripper_pose(world: *const SgWorld, out_pose: *mut SgPose) -> SgStatus {
    guard(|| {
        let w = world.as_ref().ok_or_else(|| null("world"))?;
        *out(out_pose, "out_pose")? = from_pose(&w.world.gripper.pose);
        Ok(())
    })
}
