//! Built-in tasks: world builders, initial-state samplers, success
//! predicates and the waypoint scripts that record source demos.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::demos::{segment_bounds, SegmentMode, SourceDemo};
use crate::error::{Error, Result};
use crate::geometry::{interpolate_poses, Mat3, Pose, Rotation, Vec3};
use crate::registration::{DeformableConfig, RigidFrame};
use crate::simulator::{Body, Gripper, RigidCube, SimParams, SoftBody, World};
use crate::warp::{ActionRecord, GripperCommand, TimedAction};
use crate::SCHEMA;

pub const TASK_VERSION: u32 = 1;
pub const TASK_IDS: [&str; 3] = ["rope_u", "towel_fold", "cube_stack"];

/// Gripper pointing straight down.
pub fn down_rotation() -> Rotation {
    Rotation::from_matrix_unchecked(Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0)))
}

fn down_pose(position: Vec3, yaw: f64) -> Pose {
    Pose::new(position, Rotation::from_axis_angle(&Vec3::z_axis(), yaw) * down_rotation())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripperSpec {
    pub attach_radius: f64,
    pub max_nodes: usize,
    pub home: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub schema: String,
    pub v: u32,
    pub task_id: String,
    pub sim: SimParams,
    pub gripper: GripperSpec,
    /// Object each subtask is centered on, in order.
    pub subtask_objects: Vec<String>,
    /// Steps the last action is held before the success check.
    pub settle_steps: usize,
    /// Fraction of the sampler ranges used for non-canonical source demos.
    pub source_randomization: f64,
    /// Frame convention of the rigid baseline.
    #[serde(default)]
    pub rigid_frame: RigidFrame,
    pub task: TaskKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    RopeU(RopeTask),
    TowelFold(TowelTask),
    CubeStack(CubeTask),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeTask {
    pub nodes: usize,
    pub spacing: f64,
    pub node_mass: f64,
    pub stretch: f64,
    pub bend: f64,
    /// Bend of the free half about the middle node, degrees (uniform in ±).
    pub max_bend_deg: f64,
    pub jitter: f64,
    pub sampler_settle_steps: usize,
    /// Radial bounds of the free end around the middle node after sampling.
    pub free_end_annulus: [f64; 2],
    pub success_distance: f64,
    pub script: RopeScript,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeScript {
    pub approach_height: f64,
    pub grasp_height: f64,
    pub drag_height: f64,
    /// Where the dragged end is set down, relative to node 0.
    pub place_offset: [f64; 3],
    /// Meters per step.
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowelTask {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub node_mass: f64,
    pub stretch: f64,
    pub shear: f64,
    pub max_offset: f64,
    pub max_yaw_deg: f64,
    pub sampler_settle_steps: usize,
    pub fold_distance: f64,
    pub retract_height: f64,
    pub script: TowelScript,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowelScript {
    pub grasp_height: f64,
    pub lift_height: f64,
    pub place_height: f64,
    /// Extra travel past the mirrored edge, meters.
    pub overshoot: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeTask {
    pub half_extent: f64,
    pub canonical_a: [f64; 2],
    pub canonical_b: [f64; 2],
    /// [x_min, x_max, y_min, y_max] for each cube center.
    pub region_a: [f64; 4],
    pub region_b: [f64; 4],
    pub max_yaw_deg: f64,
    pub min_separation: f64,
    pub contact_tolerance: f64,
    pub script: CubeScript,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeScript {
    pub approach_height: f64,
    pub carry_height: f64,
    pub release_clearance: f64,
    pub speed: f64,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} must be positive and finite, got {v}")))
    }
}

impl TaskSpec {
    pub fn rope_u() -> Self {
        Self {
            schema: SCHEMA.into(),
            v: TASK_VERSION,
            task_id: "rope_u".into(),
            sim: SimParams::default(),
            gripper: GripperSpec {
                attach_radius: 0.015,
                max_nodes: 3,
                home: [0.0, -0.2, 0.15],
            },
            subtask_objects: vec!["rope".into(), "rope".into()],
            settle_steps: 100,
            source_randomization: 0.25,
            rigid_frame: RigidFrame::Chord,
            task: TaskKind::RopeU(RopeTask {
                nodes: 20,
                spacing: 0.02,
                node_mass: 0.01,
                stretch: 0.9,
                bend: 0.3,
                max_bend_deg: 60.0,
                jitter: 0.005,
                sampler_settle_steps: 200,
                free_end_annulus: [0.12, 0.20],
                success_distance: 0.06,
                script: RopeScript {
                    approach_height: 0.05,
                    grasp_height: 0.005,
                    drag_height: 0.02,
                    place_offset: [0.01, 0.035, 0.0],
                    speed: 0.005,
                },
            }),
        }
    }

    pub fn towel_fold() -> Self {
        Self {
            schema: SCHEMA.into(),
            v: TASK_VERSION,
            task_id: "towel_fold".into(),
            sim: SimParams::default(),
            gripper: GripperSpec {
                attach_radius: 0.015,
                max_nodes: 3,
                home: [0.0, -0.2, 0.2],
            },
            subtask_objects: vec!["towel".into(), "towel".into()],
            settle_steps: 100,
            source_randomization: 0.25,
            rigid_frame: RigidFrame::Kabsch,
            task: TaskKind::TowelFold(TowelTask {
                rows: 10,
                cols: 10,
                spacing: 0.02,
                node_mass: 0.005,
                stretch: 0.9,
                shear: 0.5,
                max_offset: 0.05,
                max_yaw_deg: 30.0,
                sampler_settle_steps: 20,
                fold_distance: 0.03,
                retract_height: 0.15,
                script: TowelScript {
                    grasp_height: 0.005,
                    lift_height: 0.1,
                    place_height: 0.02,
                    overshoot: 0.0,
                    speed: 0.005,
                },
            }),
        }
    }

    pub fn cube_stack() -> Self {
        Self {
            schema: SCHEMA.into(),
            v: TASK_VERSION,
            task_id: "cube_stack".into(),
            sim: SimParams::default(),
            gripper: GripperSpec {
                attach_radius: 0.015,
                max_nodes: 3,
                home: [0.0, -0.2, 0.2],
            },
            subtask_objects: vec!["cube_a".into(), "cube_b".into()],
            settle_steps: 100,
            source_randomization: 0.25,
            rigid_frame: RigidFrame::Kabsch,
            task: TaskKind::CubeStack(CubeTask {
                half_extent: 0.02,
                canonical_a: [0.0, -0.09],
                canonical_b: [0.0, 0.09],
                region_a: [-0.1, 0.1, -0.15, -0.03],
                region_b: [-0.1, 0.1, 0.03, 0.15],
                max_yaw_deg: 45.0,
                min_separation: 0.08,
                contact_tolerance: 0.005,
                script: CubeScript {
                    approach_height: 0.1,
                    carry_height: 0.12,
                    release_clearance: 0.003,
                    speed: 0.005,
                },
            }),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: TaskSpec = serde_json::from_str(s)?;
        if spec.schema != SCHEMA || spec.v != TASK_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "task spec {} v{} (expected {SCHEMA} v{TASK_VERSION})",
                spec.schema, spec.v
            )));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        positive("attach_radius", self.gripper.attach_radius)?;
        if self.subtask_objects.is_empty() {
            return Err(Error::InvalidInput("task has no subtasks".into()));
        }
        match &self.task {
            TaskKind::RopeU(r) => {
                positive("spacing", r.spacing)?;
                positive("success_distance", r.success_distance)?;
                positive("max_bend_deg", r.max_bend_deg)?;
                if r.nodes < 4 || !(r.free_end_annulus[0] < r.free_end_annulus[1]) {
                    return Err(Error::InvalidInput("rope sampler ranges are empty".into()));
                }
            }
            TaskKind::TowelFold(t) => {
                positive("spacing", t.spacing)?;
                positive("fold_distance", t.fold_distance)?;
                positive("retract_height", t.retract_height)?;
                positive("max_offset", t.max_offset)?;
                if t.rows < 2 || t.cols < 2 {
                    return Err(Error::InvalidInput("towel needs at least 2x2 nodes".into()));
                }
            }
            TaskKind::CubeStack(c) => {
                positive("half_extent", c.half_extent)?;
                positive("contact_tolerance", c.contact_tolerance)?;
                for r in [c.region_a, c.region_b] {
                    if !(r[0] < r[1] && r[2] < r[3]) {
                        return Err(Error::InvalidInput("cube sampler region is empty".into()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn num_subtasks(&self) -> usize {
        self.subtask_objects.len()
    }

    fn empty_world(&self, seed: u64) -> World {
        let home = Pose::new(Vec3::from(self.gripper.home), down_rotation());
        let gripper = Gripper::new(home, self.gripper.attach_radius, self.gripper.max_nodes);
        World::new(self.sim, gripper, seed).expect("validated simulation parameters")
    }

    /// Initial world drawn from the sampler with its ranges scaled by
    /// `scale` (1 = full distribution, 0 = canonical).
    pub fn sample_world_scaled(&self, seed: u64, scale: f64) -> World {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = self.empty_world(seed);
        match &self.task {
            TaskKind::RopeU(r) => {
                let bend = (r.max_bend_deg * scale).to_radians();
                let theta = if bend > 0.0 { rng.random_range(-bend..=bend) } else { 0.0 };
                build_rope(&mut w, r, theta, &mut rng);
            }
            TaskKind::TowelFold(t) => {
                let off = t.max_offset * scale;
                let yaw = (t.max_yaw_deg * scale).to_radians();
                let dx = if off > 0.0 { rng.random_range(-off..=off) } else { 0.0 };
                let dy = if off > 0.0 { rng.random_range(-off..=off) } else { 0.0 };
                let yaw = if yaw > 0.0 { rng.random_range(-yaw..=yaw) } else { 0.0 };
                build_towel(&mut w, t, Vec3::new(dx, dy, 0.0), yaw);
            }
            TaskKind::CubeStack(c) => {
                let ([ax, ay, ayaw], [bx, by, byaw]) = sample_cubes(c, scale, &mut rng);
                w.add_body("cube_a", Body::Cube(RigidCube::resting(ax, ay, ayaw, c.half_extent)));
                w.add_body("cube_b", Body::Cube(RigidCube::resting(bx, by, byaw, c.half_extent)));
            }
        }
        w
    }

    pub fn sample_world(&self, seed: u64) -> World {
        self.sample_world_scaled(seed, 1.0)
    }

    /// The seed-independent canonical initial state.
    pub fn canonical_world(&self) -> World {
        self.sample_world_scaled(0, 0.0)
    }

    /// Initial world of scripted source demo `seed`: the canonical state for
    /// seed 0, a low-randomization sample otherwise.
    pub fn source_world(&self, seed: u64) -> World {
        if seed == 0 {
            self.canonical_world()
        } else {
            self.sample_world_scaled(seed, self.source_randomization)
        }
    }

    pub fn success(&self, w: &World) -> bool {
        match &self.task {
            TaskKind::RopeU(r) => rope_u_success(w, r.success_distance),
            TaskKind::TowelFold(t) => towel_fold_success(w, t.fold_distance, t.retract_height),
            TaskKind::CubeStack(c) => cube_stack_success(w, c.contact_tolerance),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn builtin_tasks() -> Vec<TaskSpec> {
    vec![TaskSpec::rope_u(), TaskSpec::towel_fold(), TaskSpec::cube_stack()]
}

pub fn task_by_id(id: &str) -> Result<TaskSpec> {
    builtin_tasks()
        .into_iter()
        .find(|t| t.task_id == id)
        .ok_or_else(|| Error::UnknownTask(id.to_string()))
}

fn build_rope(w: &mut World, r: &RopeTask, theta: f64, rng: &mut ChaCha8Rng) {
    let half = (r.nodes - 1) as f64 * r.spacing / 2.0;
    let mut rope = SoftBody::chain(Vec3::new(-half, 0.0, 0.0), Vec3::x(), r.nodes, r.spacing, r.node_mass, r.stretch, r.bend);
    let pivot_index = r.nodes / 2 - 1;
    let pivot = rope.nodes[pivot_index];
    let rot = Rotation::from_axis_angle(&Vec3::z_axis(), theta);
    let normal = Normal::new(0.0, r.jitter).expect("finite jitter");
    for (i, n) in rope.nodes.iter_mut().enumerate() {
        if i > pivot_index {
            *n = pivot + rot * (*n - pivot);
        }
        n.x += normal.sample(rng);
        n.y += normal.sample(rng);
    }
    w.add_body("rope", Body::Soft(rope));
    settle(w, r.sampler_settle_steps);
}

fn build_towel(w: &mut World, t: &TowelTask, offset: Vec3, yaw: f64) {
    let rot = Rotation::from_axis_angle(&Vec3::z_axis(), yaw);
    let (u, v) = (rot * Vec3::x(), rot * Vec3::y());
    let half_w = (t.cols - 1) as f64 * t.spacing / 2.0;
    let half_h = (t.rows - 1) as f64 * t.spacing / 2.0;
    let origin = offset - u * half_w - v * half_h;
    let towel = SoftBody::grid(origin, u, v, t.rows, t.cols, t.spacing, t.node_mass, t.stretch, t.shear);
    w.add_body("towel", Body::Soft(towel));
    settle(w, t.sampler_settle_steps);
}

fn sample_cubes(c: &CubeTask, scale: f64, rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    let yaw = (c.max_yaw_deg * scale).to_radians();
    let draw = |canon: [f64; 2], r: [f64; 4], rng: &mut ChaCha8Rng| {
        let lerp = |c: f64, lo: f64, hi: f64, u: f64| c + scale * (lo + (hi - lo) * u - c);
        let x = lerp(canon[0], r[0], r[1], rng.random());
        let y = lerp(canon[1], r[2], r[3], rng.random());
        let a = if yaw > 0.0 { rng.random_range(-yaw..=yaw) } else { 0.0 };
        [x, y, a]
    };
    loop {
        let a = draw(c.canonical_a, c.region_a, rng);
        let b = draw(c.canonical_b, c.region_b, rng);
        if ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() >= c.min_separation {
            return (a, b);
        }
    }
}

fn settle(w: &mut World, steps: usize) {
    let hold = TimedAction::new(0, w.gripper.pose, GripperCommand::Open);
    for _ in 0..steps {
        w.step(&hold).expect("settling a fresh world is stable");
    }
    w.step_count = 0;
}

pub fn rope_u_success(w: &World, threshold: f64) -> bool {
    let Some(rope) = w.soft("rope") else { return false };
    let (a, b) = (rope.nodes[0], rope.nodes[rope.nodes.len() - 1]);
    (a - b).norm() <= threshold && !w.gripper.state.is_closed()
}

/// Mean distance between each node of the front row band and its mirror
/// node in the back band.
pub fn towel_mirror_distance(w: &World) -> Option<f64> {
    let towel = w.soft("towel")?;
    let crate::simulator::Topology::Grid { h, w: cols } = towel.topology else {
        return None;
    };
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..h / 2 {
        for c in 0..cols {
            total += (towel.nodes[r * cols + c] - towel.nodes[(h - 1 - r) * cols + c]).norm();
            count += 1;
        }
    }
    Some(total / count as f64)
}

pub fn towel_fold_success(w: &World, threshold: f64, retract_height: f64) -> bool {
    towel_mirror_distance(w).is_some_and(|d| d <= threshold) && w.gripper.pose.position.z >= retract_height
}

pub fn cube_stack_success(w: &World, tolerance: f64) -> bool {
    let (Some(top), Some(bottom)) = (w.cube("cube_a"), w.cube("cube_b")) else {
        return false;
    };
    let d = top.pose.position - bottom.pose.position;
    let horizontal = (d.x * d.x + d.y * d.y).sqrt();
    let gap = (top.pose.position.z - top.half_extent) - (bottom.pose.position.z + bottom.half_extent);
    horizontal <= bottom.half_extent && gap.abs() <= tolerance && !w.gripper.state.is_closed()
}

/// Records executed actions, subtask snapshots and boundaries.
struct Recorder<'a> {
    spec: &'a TaskSpec,
    world: World,
    actions: Vec<TimedAction>,
    annotations: Vec<usize>,
    snapshots: BTreeMap<usize, DeformableConfig>,
}

impl<'a> Recorder<'a> {
    fn new(spec: &'a TaskSpec, world: World) -> Self {
        Self {
            spec,
            world,
            actions: Vec::new(),
            annotations: Vec::new(),
            snapshots: BTreeMap::new(),
        }
    }

    fn begin_subtask(&mut self) -> Result<()> {
        let k = self.snapshots.len();
        if !self.actions.is_empty() {
            self.annotations.push(self.actions.len());
        }
        let object = &self.spec.subtask_objects[k];
        self.snapshots.insert(k, self.world.observe(object)?);
        Ok(())
    }

    fn push(&mut self, pose: Pose, g: GripperCommand) -> Result<()> {
        let a = ActionRecord::from(&TimedAction::new(self.actions.len() as u64, pose, g)).to_action()?;
        self.world.step(&a)?;
        self.actions.push(a);
        Ok(())
    }

    fn pose(&self) -> Pose {
        self.world.gripper.pose
    }

    fn move_to(&mut self, target: Pose, g: GripperCommand, speed: f64) -> Result<()> {
        let d = (target.position - self.pose().position).norm();
        let n = ((d / speed).ceil() as usize).max(1);
        for p in interpolate_poses(&self.pose(), &target, n) {
            self.push(p, g)?;
        }
        Ok(())
    }

    fn hold(&mut self, n: usize, g: GripperCommand) -> Result<()> {
        let p = self.pose();
        for _ in 0..n {
            self.push(p, g)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<SourceDemo> {
        let last = *self.actions.last().ok_or_else(|| Error::ScriptFailed(self.spec.task_id.clone()))?;
        for _ in 0..self.spec.settle_steps {
            self.world.step(&last)?;
        }
        if !self.spec.success(&self.world) {
            return Err(Error::ScriptFailed(self.spec.task_id.clone()));
        }
        Ok(SourceDemo {
            task_id: self.spec.task_id.clone(),
            actions: self.actions,
            object_snapshots: self.snapshots,
            annotations: Some(self.annotations),
        })
    }
}

use GripperCommand::{Closed, Open};

/// Runs the task's waypoint script from [`TaskSpec::source_world`] and
/// records it as a source demo.
pub fn scripted_source_demo(spec: &TaskSpec, seed: u64) -> Result<SourceDemo> {
    let rec = Recorder::new(spec, spec.source_world(seed));
    match &spec.task {
        TaskKind::RopeU(r) => rope_script(rec, &r.script),
        TaskKind::TowelFold(t) => towel_script(rec, t),
        TaskKind::CubeStack(c) => cube_script(rec, c),
    }
}

fn rope_script(mut rec: Recorder, s: &RopeScript) -> Result<SourceDemo> {
    let rope = rec.world.observe("rope")?.nodes;
    let n = rope.len();
    let end = rope[n - 1];
    let pivot = rope[n / 2 - 1];
    let at = |p: Vec3, z: f64| down_pose(Vec3::new(p.x, p.y, z), 0.0);

    rec.begin_subtask()?;
    rec.move_to(at(end, s.approach_height), Open, s.speed)?;
    rec.move_to(at(end, s.grasp_height), Open, s.speed)?;

    rec.begin_subtask()?;
    rec.hold(2, Closed)?;
    rec.move_to(at(end, s.drag_height), Closed, s.speed)?;
    let place = rope[0] + Vec3::from(s.place_offset);
    let (r0, a0) = polar(end - pivot);
    let (r1, mut a1) = polar(place - pivot);
    if a1 < a0 {
        a1 += 2.0 * PI;
    }
    let arc_len = 0.5 * (r0 + r1) * (a1 - a0);
    let steps = ((arc_len / s.speed).ceil() as usize).max(1);
    for k in 1..=steps {
        let u = k as f64 / steps as f64;
        let (r, a) = (r0 + u * (r1 - r0), a0 + u * (a1 - a0));
        let p = pivot + Vec3::new(r * a.cos(), r * a.sin(), 0.0);
        rec.push(at(p, s.drag_height), Closed)?;
    }
    rec.move_to(at(place, s.grasp_height), Closed, s.speed)?;
    rec.hold(3, Open)?;
    rec.finish()
}

fn polar(d: Vec3) -> (f64, f64) {
    ((d.x * d.x + d.y * d.y).sqrt(), d.y.atan2(d.x))
}

fn towel_script(mut rec: Recorder, t: &TowelTask) -> Result<SourceDemo> {
    let s = &t.script;
    let nodes = rec.world.observe("towel")?.nodes;
    let (h, w) = (t.rows, t.cols);
    let node = |r: usize, c: usize| nodes[r * w + c];
    let mid = |r: usize| (node(r, (w - 1) / 2) + node(r, w / 2)) / 2.0;
    let (back, front) = (mid(h - 1), mid(0));
    let towards = (front - back).normalize();
    let yaw = (node(0, w - 1) - node(0, 0)).y.atan2((node(0, w - 1) - node(0, 0)).x);
    let at = |p: Vec3, z: f64| down_pose(Vec3::new(p.x, p.y, z), yaw);

    rec.begin_subtask()?;
    rec.move_to(at(back, s.lift_height), Open, s.speed)?;
    rec.move_to(at(back, s.grasp_height), Open, s.speed)?;

    rec.begin_subtask()?;
    rec.hold(2, Closed)?;
    let target = front + towards * s.overshoot;
    let middle = (back + target) / 2.0;
    rec.move_to(at(middle, s.lift_height), Closed, s.speed)?;
    rec.move_to(at(target, s.place_height), Closed, s.speed)?;
    rec.hold(3, Open)?;
    rec.move_to(at(target, t.retract_height + 0.03), Open, s.speed)?;
    rec.finish()
}

fn cube_script(mut rec: Recorder, c: &CubeTask) -> Result<SourceDemo> {
    let s = &c.script;
    let a = rec.world.cube("cube_a").cloned().ok_or_else(|| Error::UnknownObject("cube_a".into()))?;
    let b = rec.world.cube("cube_b").cloned().ok_or_else(|| Error::UnknownObject("cube_b".into()))?;
    let yaw_of = |cube: &RigidCube| {
        let x = cube.pose.rotation * Vec3::x();
        x.y.atan2(x.x)
    };
    let h = c.half_extent;
    let pa = a.pose.position;
    let pb = b.pose.position;
    let grasp_z = pa.z + h + 0.005;

    rec.begin_subtask()?;
    rec.move_to(down_pose(Vec3::new(pa.x, pa.y, s.approach_height), yaw_of(&a)), Open, s.speed)?;
    rec.move_to(down_pose(Vec3::new(pa.x, pa.y, grasp_z), yaw_of(&a)), Open, s.speed)?;
    rec.hold(2, Closed)?;
    rec.move_to(down_pose(Vec3::new(pa.x, pa.y, s.carry_height), yaw_of(&a)), Closed, s.speed)?;

    rec.begin_subtask()?;
    // keep the grasp offset: the held cube's center sits `grasp_z - pa.z` below the gripper
    let place_z = pb.z + 2.0 * h + s.release_clearance + (grasp_z - pa.z);
    rec.move_to(down_pose(Vec3::new(pb.x, pb.y, s.carry_height), yaw_of(&b)), Closed, s.speed)?;
    rec.move_to(down_pose(Vec3::new(pb.x, pb.y, place_z), yaw_of(&b)), Closed, s.speed)?;
    rec.hold(3, Open)?;
    rec.finish()
}

/// Rebuilds subtask snapshots of a demo by replaying it from `initial`.
pub fn snapshots_by_replay(spec: &TaskSpec, demo: &SourceDemo, initial: &World, mode: SegmentMode) -> Result<SourceDemo> {
    let bounds = segment_bounds(demo, mode)?;
    if bounds.len() != spec.num_subtasks() {
        return Err(Error::InconsistentSubtaskCount(spec.num_subtasks(), bounds.len()));
    }
    let mut w = initial.clone();
    let mut snapshots = BTreeMap::new();
    for (k, &(a, b)) in bounds.iter().enumerate() {
        snapshots.insert(k, w.observe(&spec.subtask_objects[k])?);
        for action in &demo.actions[a..b] {
            w.step(action)?;
        }
    }
    Ok(SourceDemo {
        object_snapshots: snapshots,
        ..demo.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_round_trip() {
        for spec in builtin_tasks() {
            let back = TaskSpec::from_json(&spec.to_json().unwrap()).unwrap();
            assert_eq!(back, spec);
        }
        assert!(matches!(task_by_id("jenga"), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn reset_is_deterministic() {
        for spec in builtin_tasks() {
            assert_eq!(spec.sample_world(42), spec.sample_world(42));
        }
    }

    #[test]
    fn rope_predicate() {
        let spec = TaskSpec::rope_u();
        let mut w = spec.canonical_world();
        assert!(!rope_u_success(&w, 0.06));
        let rope = w.soft_mut("rope").unwrap();
        let n = rope.nodes.len();
        for i in n / 2..n {
            rope.nodes[i] = rope.nodes[n - 1 - i] + Vec3::new(0.0, 0.0, 0.0);
        }
        assert!(rope_u_success(&w, 0.06));
        let rope = w.soft_mut("rope").unwrap();
        rope.nodes[n - 1] = rope.nodes[0] + Vec3::new(0.06, 0.0, 0.0);
        assert!(rope_u_success(&w, 0.06));
        w.gripper.state = Closed;
        assert!(!rope_u_success(&w, 0.06));
    }

    #[test]
    fn towel_predicate() {
        let spec = TaskSpec::towel_fold();
        let mut w = spec.canonical_world();
        assert!(!towel_fold_success(&w, 0.03, 0.15));
        let towel = w.soft_mut("towel").unwrap();
        for r in 5..10 {
            for c in 0..10 {
                towel.nodes[r * 10 + c] = towel.nodes[(9 - r) * 10 + c] + Vec3::new(0.0, 0.0, 0.01);
            }
        }
        w.gripper.pose.position.z = 0.2;
        assert!(towel_fold_success(&w, 0.03, 0.15));
        w.gripper.pose.position.z = 0.05;
        assert!(!towel_fold_success(&w, 0.03, 0.15));
    }

    #[test]
    fn cube_predicate() {
        let spec = TaskSpec::cube_stack();
        let mut w = spec.canonical_world();
        assert!(!cube_stack_success(&w, 0.005));
        let b = w.cube("cube_b").unwrap().pose.position;
        if let Some(Body::Cube(a)) = w.bodies.get_mut("cube_a") {
            a.pose.position = b + Vec3::new(0.0, 0.0, 0.04);
        }
        assert!(cube_stack_success(&w, 0.005));
        if let Some(Body::Cube(a)) = w.bodies.get_mut("cube_a") {
            a.pose.position = b + Vec3::new(0.0, 0.0, 0.06);
        }
        assert!(!cube_stack_success(&w, 0.005));
    }
}
