//! Field evaluation and trajectory adaptation.
//!
//! A pose `(p, R)` is carried through a field `f` as `(f(p), orth(J_f(p) R))`.
//! The rigid path pre-multiplies every pose by one constant transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose, interpolate_poses, orthonormalize, Mat3, Pose, Vec3};
use crate::registration::{DeformableConfig, WarpField};

impl WarpField {
    pub fn eval(&self, x: &Vec3) -> Vec3 {
        let mut out = self.affine * x + self.offset;
        for (w, c) in self.rbf_weights.iter().zip(&self.control_points) {
            out += w * (x - c).norm();
        }
        out
    }

    /// Analytic Jacobian; the kernel gradient `(x - c)/|x - c|` uses a
    /// denominator clamped at `kernel_epsilon`.
    pub fn jacobian(&self, x: &Vec3) -> Mat3 {
        let mut j = self.affine;
        for (w, c) in self.rbf_weights.iter().zip(&self.control_points) {
            let d = x - c;
            let r = d.norm().max(self.kernel_epsilon);
            j += w * (d / r).transpose();
        }
        j
    }
}

pub fn eval_field(f: &WarpField, x: &Vec3) -> Vec3 {
    f.eval(x)
}

pub fn eval_jacobian(f: &WarpField, x: &Vec3) -> Mat3 {
    f.jacobian(x)
}

pub fn transform_pose(f: &WarpField, p: &Pose) -> Result<Pose> {
    let rotation = orthonormalize(&(f.jacobian(&p.position) * p.rotation.matrix()))?;
    Ok(Pose {
        position: f.eval(&p.position),
        rotation,
    })
}

/// Binary gripper command; serialized as `0` (open) or `1` (closed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum GripperCommand {
    #[default]
    Open,
    Closed,
}

impl GripperCommand {
    pub fn is_closed(self) -> bool {
        self == GripperCommand::Closed
    }

    pub fn as_u8(self) -> u8 {
        match self {
            GripperCommand::Open => 0,
            GripperCommand::Closed => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(GripperCommand::Open),
            1 => Ok(GripperCommand::Closed),
            other => Err(Error::InvalidInput(format!("gripper command must be 0 or 1, got {other}"))),
        }
    }
}

impl Serialize for GripperCommand {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for GripperCommand {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        GripperCommand::from_u8(u8::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedAction {
    pub pose: Pose,
    pub gripper: GripperCommand,
    pub t: u64,
}

impl TimedAction {
    pub fn new(t: u64, pose: Pose, gripper: GripperCommand) -> Self {
        Self { pose, gripper, t }
    }
}

/// File representation of one action: `{"t":..,"p":[..],"q":[w,x,y,z],"g":0|1}`.
///
/// Executing `ActionRecord::to_action` of a stored record reproduces the
/// executed pose bit for bit, which a pose re-encoded from its rotation
/// matrix does not guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub t: u64,
    pub p: [f64; 3],
    pub q: [f64; 4],
    pub g: GripperCommand,
}

impl ActionRecord {
    pub fn to_action(&self) -> Result<TimedAction> {
        Ok(TimedAction {
            pose: Pose::from_quaternion(Vec3::from(self.p), self.q)?,
            gripper: self.g,
            t: self.t,
        })
    }
}

impl From<&TimedAction> for ActionRecord {
    fn from(a: &TimedAction) -> Self {
        let p = a.pose.position;
        ActionRecord {
            t: a.t,
            p: [p.x, p.y, p.z],
            q: a.pose.quaternion(),
            g: a.gripper,
        }
    }
}

impl Serialize for TimedAction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ActionRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for TimedAction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        ActionRecord::deserialize(d)?
            .to_action()
            .map_err(serde::de::Error::custom)
    }
}

/// Contiguous object-centric piece of a demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySegment {
    pub actions: Vec<TimedAction>,
    pub subtask_index: usize,
    /// Object state observed when the segment began.
    pub start_config: DeformableConfig,
}

impl TrajectorySegment {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn first_pose(&self) -> Option<Pose> {
        self.actions.first().map(|a| a.pose)
    }
}

/// Carries every pose of `seg` through `f`. The result starts from
/// `target`, the configuration `f` was fitted onto.
pub fn warp_segment(f: &WarpField, seg: &TrajectorySegment, target: &DeformableConfig) -> Result<TrajectorySegment> {
    let actions = seg
        .actions
        .iter()
        .map(|a| {
            Ok(TimedAction {
                pose: transform_pose(f, &a.pose)?,
                ..*a
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectorySegment {
        actions,
        subtask_index: seg.subtask_index,
        start_config: target.clone(),
    })
}

/// Pre-multiplies every pose of `seg` by `t`.
pub fn rigid_transform_segment(t: &Pose, seg: &TrajectorySegment) -> TrajectorySegment {
    TrajectorySegment {
        actions: seg
            .actions
            .iter()
            .map(|a| TimedAction {
                pose: compose(t, &a.pose),
                ..*a
            })
            .collect(),
        subtask_index: seg.subtask_index,
        start_config: seg.start_config.transformed(t),
    }
}

/// Prepends `n_interp` interpolated poses from `current` to the first pose
/// of `seg`, holding the segment's first gripper command, and renumbers
/// steps from zero.
pub fn bridge(current: &Pose, seg: &TrajectorySegment, n_interp: usize) -> Result<TrajectorySegment> {
    let first = seg
        .actions
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot bridge into an empty segment".into()))?;
    let mut actions: Vec<TimedAction> = interpolate_poses(current, &first.pose, n_interp.max(1))
        .into_iter()
        .map(|pose| TimedAction::new(0, pose, first.gripper))
        .collect();
    actions.extend(seg.actions.iter().copied());
    for (k, a) in actions.iter_mut().enumerate() {
        a.t = k as u64;
    }
    Ok(TrajectorySegment {
        actions,
        subtask_index: seg.subtask_index,
        start_config: seg.start_config.clone(),
    })
}

/// Distance-proportional bridge length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpPolicy {
    /// Meters travelled per bridging step.
    pub step: f64,
    pub min_steps: usize,
    pub max_steps: usize,
}

impl Default for InterpPolicy {
    fn default() -> Self {
        Self {
            step: 0.01,
            min_steps: 5,
            max_steps: 100,
        }
    }
}

impl InterpPolicy {
    pub fn steps(&self, from: &Pose, to: &Pose) -> usize {
        let d = (to.position - from.position).norm();
        let raw = (d / self.step).ceil();
        let raw = if raw.is_finite() { raw as usize } else { self.max_steps };
        raw.clamp(self.min_steps.max(1), self.max_steps.max(self.min_steps.max(1)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use nalgebra::Vector3;

    fn seg() -> TrajectorySegment {
        let actions = (0..6)
            .map(|k| {
                let g = if k < 3 { GripperCommand::Open } else { GripperCommand::Closed };
                TimedAction::new(
                    k,
                    Pose::new(
                        Vec3::new(0.05 * k as f64, -0.02, 0.1 - 0.01 * k as f64),
                        Rotation::from_euler_angles(3.1, 0.05 * k as f64, 0.2),
                    ),
                    g,
                )
            })
            .collect();
        TrajectorySegment {
            actions,
            subtask_index: 0,
            start_config: DeformableConfig::new("o", vec![Vec3::zeros()]),
        }
    }

    #[test]
    fn identity_field_fixes_points_and_poses() {
        let f = WarpField::identity();
        let x = Vec3::new(0.3, -2.0, 7.0);
        assert_eq!(f.eval(&x), x);
        assert_eq!(f.jacobian(&x), Mat3::identity());
        let s = seg();
        let w = warp_segment(&f, &s, &s.start_config).unwrap();
        for (a, b) in w.actions.iter().zip(&s.actions) {
            assert!((a.pose.position - b.pose.position).norm() < 1e-12);
            assert!((a.pose.rotation.matrix() - b.pose.rotation.matrix()).norm() < 1e-12);
        }
    }

    #[test]
    fn affine_field_jacobian_is_constant() {
        let m = Mat3::new(1.0, 0.2, 0.0, -0.1, 0.9, 0.3, 0.0, 0.0, 1.5);
        let f = WarpField::affine_map(m, Vec3::new(1.0, 2.0, 3.0));
        for x in [Vec3::zeros(), Vec3::new(4.0, -1.0, 0.5)] {
            assert_eq!(f.jacobian(&x), m);
        }
        let d = Vec3::new(0.1, 0.2, 0.3);
        let t = WarpField::affine_map(Mat3::identity(), d);
        assert_eq!(t.eval(&Vec3::x()), Vec3::x() + d);
    }

    #[test]
    fn rigid_field_matches_constant_transform() {
        let t = Pose::new(
            Vec3::new(0.2, -0.1, 0.05),
            Rotation::from_axis_angle(&Vector3::z_axis(), 0.7),
        );
        let f = WarpField::from_pose(&t);
        let p = Pose::new(Vec3::new(0.1, 0.2, 0.3), Rotation::from_euler_angles(0.1, 0.2, 0.3));
        let a = transform_pose(&f, &p).unwrap();
        let b = compose(&t, &p);
        assert!((a.position - b.position).norm() < 1e-12);
        assert!((a.rotation.matrix() - b.rotation.matrix()).norm() < 1e-12);
    }

    #[test]
    fn uniform_scale_keeps_rotation() {
        let f = WarpField::affine_map(Mat3::identity() * 2.0, Vec3::zeros());
        let p = Pose::new(Vec3::new(0.1, 0.2, 0.3), Rotation::from_euler_angles(0.4, -0.2, 1.0));
        let out = transform_pose(&f, &p).unwrap();
        assert_eq!(out.position, p.position * 2.0);
        assert!((out.rotation.matrix() - p.rotation.matrix()).norm() < 1e-12);
    }

    #[test]
    fn collapsing_field_reports_degenerate_matrix() {
        let f = WarpField::affine_map(Mat3::zeros(), Vec3::zeros());
        assert!(matches!(
            transform_pose(&f, &Pose::identity()),
            Err(Error::DegenerateMatrix(_))
        ));
    }

    #[test]
    fn rigid_segment_cases() {
        let s = seg();
        let same = rigid_transform_segment(&Pose::identity(), &s);
        assert_eq!(same.actions, s.actions);

        let d = Vec3::new(0.0, 0.3, -0.1);
        let shifted = rigid_transform_segment(&Pose::from_translation(d), &s);
        for (a, b) in shifted.actions.iter().zip(&s.actions) {
            assert!((a.pose.position - (b.pose.position + d)).norm() < 1e-15);
            assert_eq!(a.gripper, b.gripper);
        }

        let rz = Pose::from_yaw(std::f64::consts::FRAC_PI_2, Vec3::zeros());
        let one = TrajectorySegment {
            actions: vec![TimedAction::new(0, Pose::from_translation(Vec3::x()), GripperCommand::Open)],
            ..s.clone()
        };
        let out = rigid_transform_segment(&rz, &one);
        assert!((out.actions[0].pose.position - Vec3::y()).norm() < 1e-15);
        assert!(out.actions[0].pose.rotation.angle_to(&rz.rotation) < 1e-15);
    }

    #[test]
    fn bridge_cases() {
        let s = seg();
        let first = s.actions[0].pose;
        let b = bridge(&first, &s, 4).unwrap();
        assert_eq!(b.len(), s.len() + 4);
        assert!(b.actions[..4].iter().all(|a| a.pose == first && a.gripper == s.actions[0].gripper));
        assert!(b.actions.iter().enumerate().all(|(k, a)| a.t == k as u64));

        let one = bridge(&Pose::identity(), &s, 1).unwrap();
        assert_eq!(one.actions[0].pose, first);

        let far = Pose::from_translation(first.position - Vec3::new(0.4, 0.0, 0.0));
        let b = bridge(&Pose::new(far.position, first.rotation), &s, 20).unwrap();
        for k in 1..20 {
            let step = (b.actions[k].pose.position - b.actions[k - 1].pose.position).norm();
            assert!((step - 0.02).abs() < 1e-12);
        }
        assert_eq!(b.actions[19].pose, first);
    }

    #[test]
    fn interp_policy_clamps() {
        let p = InterpPolicy::default();
        let a = Pose::identity();
        assert_eq!(p.steps(&a, &a), 5);
        assert_eq!(p.steps(&a, &Pose::from_translation(Vec3::new(0.2, 0.0, 0.0))), 20);
        assert_eq!(p.steps(&a, &Pose::from_translation(Vec3::new(5.0, 0.0, 0.0))), 100);
    }

    #[test]
    fn action_record_shape() {
        let a = TimedAction::new(3, Pose::from_translation(Vec3::new(1.0, 2.0, 3.0)), GripperCommand::Closed);
        let v = serde_json::to_value(a).unwrap();
        assert_eq!(v["t"], 3);
        assert_eq!(v["g"], 1);
        assert_eq!(v["q"], serde_json::json!([1.0, 0.0, 0.0, 0.0]));
        assert!(serde_json::from_str::<TimedAction>(r#"{"t":0,"p":[0,0,0],"q":[1,0,0,0],"g":2}"#).is_err());
    }
}
