//! Rigid-body geometry: poses, nearest-rotation projection, Kabsch alignment
//! and pose interpolation.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Rotation = Rotation3<f64>;

/// End-effector or object pose in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub rotation: Rotation,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(position: Vec3, rotation: Rotation) -> Self {
        Self { position, rotation }
    }

    pub fn identity() -> Self {
        Self {
            position: Vec3::zeros(),
            rotation: Rotation::identity(),
        }
    }

    pub fn from_translation(position: Vec3) -> Self {
        Self {
            position,
            rotation: Rotation::identity(),
        }
    }

    /// Rotation about world z by `angle` radians, at `position`.
    pub fn from_yaw(angle: f64, position: Vec3) -> Self {
        Self {
            position,
            rotation: Rotation::from_axis_angle(&Vector3::z_axis(), angle),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.position
    }

    /// Canonical unit quaternion (w, x, y, z) with `w >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&self.rotation);
        let mut c = [q.w, q.i, q.j, q.k];
        if c[0] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        c
    }

    /// Builds a pose from a position and a (possibly unnormalized) quaternion.
    pub fn from_quaternion(position: Vec3, q: [f64; 4]) -> Result<Self> {
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::InvalidInput(format!(
                "quaternion {q:?} cannot be normalized"
            )));
        }
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            q[0], q[1], q[2], q[3],
        ));
        Ok(Self {
            position,
            rotation: uq.to_rotation_matrix(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.rotation.matrix().iter().all(|v| v.is_finite())
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct PoseWire {
    pub(crate) p: [f64; 3],
    pub(crate) q: [f64; 4],
}

impl From<&Pose> for PoseWire {
    fn from(pose: &Pose) -> Self {
        Self {
            p: [pose.position.x, pose.position.y, pose.position.z],
            q: pose.quaternion(),
        }
    }
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PoseWire::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = PoseWire::deserialize(d)?;
        Pose::from_quaternion(Vec3::from(w.p), w.q).map_err(serde::de::Error::custom)
    }
}

/// Pose of frame `b` expressed through frame `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        position: a.rotation * b.position + a.position,
        rotation: a.rotation * b.rotation,
    }
}

pub fn inverse(p: &Pose) -> Pose {
    let rt = p.rotation.inverse();
    Pose {
        position: -(rt * p.position),
        rotation: rt,
    }
}

/// Nearest rotation to `m` in the Frobenius norm (polar factor). When the
/// polar factor is a reflection, the singular direction with the smallest
/// singular value is flipped.
pub fn orthonormalize(m: &Mat3) -> Result<Rotation> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateMatrix("non-finite entries".into()));
    }
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
    if s[order[1]] < 1e-12 {
        return Err(Error::DegenerateMatrix(format!(
            "singular values {:?} leave the rotation undefined",
            s.as_slice()
        )));
    }
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u_fixed = u;
        let k = order[0];
        u_fixed.column_mut(k).neg_mut();
        r = u_fixed * v_t;
    }
    Ok(Rotation::from_matrix_unchecked(r))
}

/// `n_steps` poses strictly after `a`, ending exactly at `b`. Positions are
/// linear; rotations follow the shortest-arc slerp.
pub fn interpolate_poses(a: &Pose, b: &Pose, n_steps: usize) -> Vec<Pose> {
    let n = n_steps.max(1);
    let qa = UnitQuaternion::from_rotation_matrix(&a.rotation);
    let mut qb = UnitQuaternion::from_rotation_matrix(&b.rotation);
    if qa.coords.dot(&qb.coords) < 0.0 {
        qb = UnitQuaternion::new_unchecked(-qb.into_inner());
    }
    let mut out = Vec::with_capacity(n);
    for k in 1..n {
        let s = k as f64 / n as f64;
        let position = a.position + (b.position - a.position) * s;
        let q = qa.try_slerp(&qb, s, 1e-12).unwrap_or_else(|| {
            // antipodal within tolerance cannot happen after the hemisphere
            // fix, so this is the identical-rotation case
            qa
        });
        let rotation = if a.rotation == b.rotation { b.rotation } else { q.to_rotation_matrix() };
        out.push(Pose { position, rotation });
    }
    out.push(*b);
    out
}

/// Least-squares rigid transform taking `src` onto `tgt`.
pub fn kabsch_fit(src: &[Vec3], tgt: &[Vec3]) -> Result<Pose> {
    kabsch(src, tgt, false)
}

/// [`kabsch_fit`] that also accepts a collinear source. The spin about the
/// source line is then arbitrary, but the residual is still minimal.
pub fn kabsch_fit_any(src: &[Vec3], tgt: &[Vec3]) -> Result<Pose> {
    kabsch(src, tgt, true)
}

fn kabsch(src: &[Vec3], tgt: &[Vec3], allow_collinear: bool) -> Result<Pose> {
    if src.len() != tgt.len() {
        return Err(Error::ShapeMismatch {
            src: src.len(),
            tgt: tgt.len(),
        });
    }
    if src.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "need at least 3 points, got {}",
            src.len()
        )));
    }
    let n = src.len() as f64;
    let cs = centroid(src);
    let ct = centroid(tgt);

    let mut scatter = Mat3::zeros();
    let mut cross = Mat3::zeros();
    for (a, b) in src.iter().zip(tgt) {
        let da = a - cs;
        let db = b - ct;
        scatter += da * da.transpose();
        cross += da * db.transpose();
    }
    // principal spreads of the source, as RMS distances
    let mut ev = scatter.symmetric_eigenvalues();
    ev.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    let spread = |k: usize| (ev[k].max(0.0) / n).sqrt();
    if spread(0) <= 1e-9 {
        return Err(Error::DegenerateInput("source points coincide".into()));
    }
    if spread(1) <= 1e-9 && !allow_collinear {
        return Err(Error::DegenerateInput("source points are collinear".into()));
    }

    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let mut r = v * u.transpose();
    if r.determinant() < 0.0 {
        let s = svd.singular_values;
        let k = (0..3).min_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        let mut v_fixed = v;
        v_fixed.column_mut(k).neg_mut();
        r = v_fixed * u.transpose();
    }
    let rotation = Rotation::from_matrix_unchecked(r);
    Ok(Pose {
        position: ct - rotation * cs,
        rotation,
    })
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    if points.is_empty() {
        return Vec3::zeros();
    }
    points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// Geodesic angle between two rotations, radians.
pub fn rotation_angle_between(a: &Rotation, b: &Rotation) -> f64 {
    a.angle_to(b)
}
