//! Desk-scale position-based dynamics world.
//!
//! Soft bodies are particle sets tied by distance constraints and solved with
//! Gauss-Seidel projection in a fixed order. Cubes fall onto a support
//! surface (the ground or another cube). The gripper is kinematic: closing it
//! attaches nearby nodes or cubes, which then follow the gripper frame until
//! it opens again.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose, inverse, Pose, Vec3};
use crate::registration::DeformableConfig;
use crate::tasks::TaskSpec;
use crate::warp::{GripperCommand, TimedAction};

pub const SNAPSHOT_VERSION: u32 = 1;
const BLOWUP_LIMIT: f64 = 100.0;
const CONTACT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Chain(usize),
    Grid { h: usize, w: usize },
}

/// Stretch constraints are held to the solver tolerance. Shear and bend
/// constraints are compliant: a grid whose quads carry both diagonals is
/// rigid per quad, so holding shear exactly would forbid any fold that does
/// not follow a grid line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Stretch,
    Shear,
    Bend,
}

impl ConstraintKind {
    pub fn is_structural(self) -> bool {
        matches!(self, ConstraintKind::Stretch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceConstraint {
    pub i: usize,
    pub j: usize,
    pub rest_length: f64,
    pub stiffness: f64,
    pub kind: ConstraintKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftBody {
    pub nodes: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub masses: Vec<f64>,
    pub constraints: Vec<DistanceConstraint>,
    pub pinned: BTreeSet<usize>,
    pub topology: Topology,
}

impl SoftBody {
    /// Chain of `n` nodes along `direction` from `start`, with stretch
    /// constraints between neighbors and bend constraints between second
    /// neighbors.
    pub fn chain(start: Vec3, direction: Vec3, n: usize, spacing: f64, node_mass: f64, stretch: f64, bend: f64) -> Self {
        let dir = direction.normalize();
        let nodes: Vec<Vec3> = (0..n).map(|i| start + dir * (spacing * i as f64)).collect();
        let mut constraints = Vec::new();
        for i in 0..n.saturating_sub(1) {
            constraints.push(DistanceConstraint {
                i,
                j: i + 1,
                rest_length: spacing,
                stiffness: stretch,
                kind: ConstraintKind::Stretch,
            });
        }
        for i in 0..n.saturating_sub(2) {
            constraints.push(DistanceConstraint {
                i,
                j: i + 2,
                rest_length: 2.0 * spacing,
                stiffness: bend,
                kind: ConstraintKind::Bend,
            });
        }
        Self {
            velocities: vec![Vec3::zeros(); n],
            masses: vec![node_mass; n],
            nodes,
            constraints,
            pinned: BTreeSet::new(),
            topology: Topology::Chain(n),
        }
    }

    /// Row-major `h x w` grid in the plane spanned by `u` (columns) and `v`
    /// (rows), with structural and shear constraints.
    #[allow(clippy::too_many_arguments)]
    pub fn grid(origin: Vec3, u: Vec3, v: Vec3, h: usize, w: usize, spacing: f64, node_mass: f64, stretch: f64, shear: f64) -> Self {
        let (u, v) = (u.normalize(), v.normalize());
        let mut nodes = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                nodes.push(origin + u * (spacing * c as f64) + v * (spacing * r as f64));
            }
        }
        let id = |r: usize, c: usize| r * w + c;
        let mut constraints = Vec::new();
        let mut add = |i, j, rest, stiffness, kind| {
            constraints.push(DistanceConstraint {
                i,
                j,
                rest_length: rest,
                stiffness,
                kind,
            })
        };
        for r in 0..h {
            for c in 0..w {
                if c + 1 < w {
                    add(id(r, c), id(r, c + 1), spacing, stretch, ConstraintKind::Stretch);
                }
                if r + 1 < h {
                    add(id(r, c), id(r + 1, c), spacing, stretch, ConstraintKind::Stretch);
                }
            }
        }
        let diag = spacing * std::f64::consts::SQRT_2;
        for r in 0..h.saturating_sub(1) {
            for c in 0..w.saturating_sub(1) {
                add(id(r, c), id(r + 1, c + 1), diag, shear, ConstraintKind::Shear);
                add(id(r, c + 1), id(r + 1, c), diag, shear, ConstraintKind::Shear);
            }
        }
        Self {
            velocities: vec![Vec3::zeros(); h * w],
            masses: vec![node_mass; h * w],
            nodes,
            constraints,
            pinned: BTreeSet::new(),
            topology: Topology::Grid { h, w },
        }
    }

    /// Largest stretch violation relative to rest length.
    pub fn max_relative_violation(&self) -> f64 {
        self.constraints
            .iter()
            .filter(|c| c.kind.is_structural())
            .map(|c| ((self.nodes[c.i] - self.nodes[c.j]).norm() - c.rest_length).abs() / c.rest_length)
            .fold(0.0, f64::max)
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.velocities
            .iter()
            .zip(&self.masses)
            .map(|(v, m)| 0.5 * m * v.norm_squared())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidCube {
    pub pose: Pose,
    pub half_extent: f64,
    pub velocity: Vec3,
    pub angular_velocity: Vec3,
}

impl RigidCube {
    pub fn resting(x: f64, y: f64, yaw: f64, half_extent: f64) -> Self {
        Self {
            pose: Pose::from_yaw(yaw, Vec3::new(x, y, half_extent)),
            half_extent,
            velocity: Vec3::zeros(),
            angular_velocity: Vec3::zeros(),
        }
    }

    /// Corners in a fixed order: x outermost, then y, then z, minus before plus.
    pub fn corners(&self) -> Vec<Vec3> {
        let h = self.half_extent;
        let mut out = Vec::with_capacity(8);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    out.push(self.pose.transform_point(&Vec3::new(sx * h, sy * h, sz * h)));
                }
            }
        }
        out
    }

    /// Euclidean distance from `p` to the cube (zero inside).
    pub fn distance_to(&self, p: &Vec3) -> f64 {
        let local = inverse(&self.pose).transform_point(p);
        let h = self.half_extent;
        let clamped = local.map(|v| v.clamp(-h, h));
        (local - clamped).norm()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Body {
    Soft(SoftBody),
    Cube(RigidCube),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Attachment {
    /// Soft node held at a fixed offset in the gripper frame.
    Node { body: String, index: usize, offset: Vec3 },
    /// Whole rigid body held at a fixed relative pose.
    Rigid { body: String, relative: Pose },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub pose: Pose,
    pub state: GripperCommand,
    pub attached: Vec<Attachment>,
    pub attach_radius: f64,
    /// Soft nodes grabbed per body, nearest first.
    pub max_nodes: usize,
}

impl Gripper {
    pub fn new(pose: Pose, attach_radius: f64, max_nodes: usize) -> Self {
        Self {
            pose,
            state: GripperCommand::Open,
            attached: Vec::new(),
            attach_radius,
            max_nodes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub gravity: Vec3,
    pub dt: f64,
    pub solver_iters: usize,
    pub damping: f64,
    /// Fraction of horizontal velocity removed per step for nodes on the ground.
    pub ground_friction: f64,
    /// Structural violation (relative to rest length) the solver keeps
    /// iterating towards after the fixed sweeps.
    pub tolerance: f64,
    pub max_extra_iters: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            gravity: Vec3::new(0.0, 0.0, -9.81),
            dt: 0.01,
            solver_iters: 10,
            damping: 0.02,
            ground_friction: 0.5,
            tolerance: 5e-4,
            max_extra_iters: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub bodies: BTreeMap<String, Body>,
    pub gripper: Gripper,
    pub params: SimParams,
    pub rng_seed: u64,
    pub step_count: u64,
}

#[derive(Serialize, Deserialize)]
struct SnapshotWire {
    schema: String,
    v: u32,
    #[serde(flatten)]
    world: World,
}

impl World {
    pub fn new(params: SimParams, gripper: Gripper, rng_seed: u64) -> Result<Self> {
        if !(params.dt > 0.0 && params.dt <= 0.05) {
            return Err(Error::InvalidInput(format!("dt must be in (0, 0.05], got {}", params.dt)));
        }
        if params.solver_iters == 0 {
            return Err(Error::InvalidInput("solver_iters must be positive".into()));
        }
        Ok(Self {
            bodies: BTreeMap::new(),
            gripper,
            params,
            rng_seed,
            step_count: 0,
        })
    }

    pub fn add_body(&mut self, id: impl Into<String>, body: Body) {
        self.bodies.insert(id.into(), body);
    }

    pub fn soft(&self, id: &str) -> Option<&SoftBody> {
        match self.bodies.get(id) {
            Some(Body::Soft(s)) => Some(s),
            _ => None,
        }
    }

    pub fn soft_mut(&mut self, id: &str) -> Option<&mut SoftBody> {
        match self.bodies.get_mut(id) {
            Some(Body::Soft(s)) => Some(s),
            _ => None,
        }
    }

    pub fn cube(&self, id: &str) -> Option<&RigidCube> {
        match self.bodies.get(id) {
            Some(Body::Cube(c)) => Some(c),
            _ => None,
        }
    }

    /// Node positions of a soft body, or the eight corners of a cube.
    pub fn observe(&self, object_id: &str) -> Result<DeformableConfig> {
        match self.bodies.get(object_id) {
            Some(Body::Soft(s)) => Ok(DeformableConfig::new(object_id, s.nodes.clone())),
            Some(Body::Cube(c)) => Ok(DeformableConfig::new(object_id, c.corners())),
            None => Err(Error::UnknownObject(object_id.to_string())),
        }
    }

    pub fn max_relative_violation(&self) -> f64 {
        self.bodies
            .values()
            .filter_map(|b| match b {
                Body::Soft(s) => Some(s.max_relative_violation()),
                Body::Cube(_) => None,
            })
            .fold(0.0, f64::max)
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.bodies
            .values()
            .map(|b| match b {
                Body::Soft(s) => s.kinetic_energy(),
                Body::Cube(c) => 0.5 * c.velocity.norm_squared(),
            })
            .sum()
    }

    fn is_attached_node(&self, body: &str, index: usize) -> bool {
        self.gripper.attached.iter().any(|a| matches!(a, Attachment::Node { body: b, index: i, .. } if b == body && *i == index))
    }

    fn is_attached_rigid(&self, body: &str) -> bool {
        self.gripper.attached.iter().any(|a| matches!(a, Attachment::Rigid { body: b, .. } if b == body))
    }

    fn attach(&mut self) {
        let g = self.gripper.pose;
        let g_inv = inverse(&g);
        let radius = self.gripper.attach_radius;
        let mut grabbed = Vec::new();
        for (id, body) in &self.bodies {
            match body {
                Body::Soft(s) => {
                    let mut near: Vec<(f64, usize)> = s
                        .nodes
                        .iter()
                        .enumerate()
                        .map(|(i, n)| ((n - g.position).norm(), i))
                        .filter(|(d, _)| *d <= radius)
                        .collect();
                    near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    for &(_, i) in near.iter().take(self.gripper.max_nodes) {
                        grabbed.push(Attachment::Node {
                            body: id.clone(),
                            index: i,
                            offset: g_inv.transform_point(&s.nodes[i]),
                        });
                    }
                }
                Body::Cube(c) => {
                    if c.distance_to(&g.position) <= radius {
                        grabbed.push(Attachment::Rigid {
                            body: id.clone(),
                            relative: compose(&g_inv, &c.pose),
                        });
                    }
                }
            }
        }
        self.gripper.attached = grabbed;
    }

    /// Advances one step with the gripper commanded to `action`.
    pub fn step(&mut self, action: &TimedAction) -> Result<()> {
        if !action.pose.is_finite() {
            return Err(Error::NumericalBlowup {
                step: self.step_count,
                detail: "non-finite gripper command".into(),
            });
        }
        let was_closed = self.gripper.state.is_closed();
        self.gripper.pose = action.pose;
        self.gripper.state = action.gripper;
        match (was_closed, action.gripper.is_closed()) {
            (false, true) => self.attach(),
            (true, false) => self.gripper.attached.clear(),
            _ => {}
        }

        let params = self.params;
        let g = self.gripper.pose;
        let attached = self.gripper.attached.clone();

        // kinematic attachments
        for a in &attached {
            match a {
                Attachment::Rigid { body, relative } => {
                    if let Some(Body::Cube(c)) = self.bodies.get_mut(body) {
                        let next = compose(&g, relative);
                        c.velocity = (next.position - c.pose.position) / params.dt;
                        c.angular_velocity = Vec3::zeros();
                        c.pose = next;
                    }
                }
                Attachment::Node { .. } => {}
            }
        }

        let ids: Vec<String> = self.bodies.keys().cloned().collect();
        for id in &ids {
            let fixed: Vec<bool> = match self.bodies.get(id) {
                Some(Body::Soft(s)) => (0..s.nodes.len())
                    .map(|i| s.pinned.contains(&i) || self.is_attached_node(id, i))
                    .collect(),
                _ => continue,
            };
            let targets: Vec<(usize, Vec3)> = attached
                .iter()
                .filter_map(|a| match a {
                    Attachment::Node { body, index, offset } if body == id => Some((*index, g.transform_point(offset))),
                    _ => None,
                })
                .collect();
            if let Some(Body::Soft(s)) = self.bodies.get_mut(id) {
                solve_soft(s, &fixed, &targets, &params);
            }
        }

        // free cubes, lowest first so stacks settle bottom-up
        let mut cubes: Vec<(f64, String)> = self
            .bodies
            .iter()
            .filter_map(|(id, b)| match b {
                Body::Cube(c) if !self.is_attached_rigid(id) => Some((c.pose.position.z, id.clone())),
                _ => None,
            })
            .collect();
        cubes.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        for (_, id) in cubes {
            let support = self.support_height(&id);
            if let Some(Body::Cube(c)) = self.bodies.get_mut(&id) {
                c.velocity += params.gravity * params.dt;
                c.velocity *= 1.0 - params.damping;
                c.pose.position += c.velocity * params.dt;
                if c.pose.position.z <= support {
                    c.pose.position.z = support;
                    c.velocity = Vec3::zeros();
                }
            }
        }

        self.step_count += 1;
        self.check_finite()
    }

    /// Height at which the center of cube `id` rests: on the ground or on
    /// top of another cube it overlaps horizontally.
    fn support_height(&self, id: &str) -> f64 {
        let Some(me) = self.cube(id) else { return 0.0 };
        let h = me.half_extent;
        let mut support = h;
        for (other_id, body) in &self.bodies {
            if other_id == id {
                continue;
            }
            if let Body::Cube(o) = body {
                let d = me.pose.position - o.pose.position;
                let reach = h + o.half_extent;
                let top = o.pose.position.z + o.half_extent;
                if d.x.abs() < reach && d.y.abs() < reach && me.pose.position.z >= top - 1e-9 {
                    support = support.max(top + h);
                }
            }
        }
        support
    }

    fn check_finite(&self) -> Result<()> {
        let bad = |v: &Vec3| v.iter().any(|c| !c.is_finite() || c.abs() > BLOWUP_LIMIT);
        for (id, body) in &self.bodies {
            let broken = match body {
                Body::Soft(s) => s.nodes.iter().any(bad),
                Body::Cube(c) => bad(&c.pose.position),
            };
            if broken {
                return Err(Error::NumericalBlowup {
                    step: self.step_count,
                    detail: format!("body `{id}` left the workspace"),
                });
            }
        }
        Ok(())
    }

    pub fn to_snapshot_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&SnapshotWire {
            schema: crate::SCHEMA.to_string(),
            v: SNAPSHOT_VERSION,
            world: self.clone(),
        })?)
    }

    pub fn from_snapshot_json(s: &str) -> Result<Self> {
        let wire: SnapshotWire = serde_json::from_str(s)?;
        if wire.schema != crate::SCHEMA || wire.v != SNAPSHOT_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "snapshot {} v{} (expected {} v{})",
                wire.schema,
                wire.v,
                crate::SCHEMA,
                SNAPSHOT_VERSION
            )));
        }
        Ok(wire.world)
    }
}

fn project(p: &mut [Vec3], inv_mass: &[f64], c: &DistanceConstraint) {
    let (wi, wj) = (inv_mass[c.i], inv_mass[c.j]);
    let w = wi + wj;
    if w == 0.0 {
        return;
    }
    let d = p[c.i] - p[c.j];
    let len = d.norm();
    if len < 1e-12 {
        return;
    }
    let corr = d * (c.stiffness * (len - c.rest_length) / (len * w));
    p[c.i] -= corr * wi;
    p[c.j] += corr * wj;
}

fn project_ground(p: &mut [Vec3], inv_mass: &[f64]) {
    for (x, w) in p.iter_mut().zip(inv_mass) {
        if *w > 0.0 && x.z < 0.0 {
            x.z = 0.0;
        }
    }
}

/// Constraint order for the Gauss-Seidel sweeps: breadth-first outward from
/// the kinematic nodes, so a single sweep carries their motion across the
/// body. Bodies without kinematic nodes keep their declared order.
fn sweep_order(s: &SoftBody, fixed: &[bool]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s.constraints.len()).collect();
    if !fixed.iter().any(|&f| f) {
        return order;
    }
    let n = s.nodes.len();
    let mut adjacency = vec![Vec::new(); n];
    for c in s.constraints.iter().filter(|c| c.kind.is_structural()) {
        adjacency[c.i].push(c.j);
        adjacency[c.j].push(c.i);
    }
    let mut hops = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    for i in (0..n).filter(|&i| fixed[i]) {
        hops[i] = 0;
        queue.push_back(i);
    }
    while let Some(i) = queue.pop_front() {
        for &j in &adjacency[i] {
            if hops[j] == usize::MAX {
                hops[j] = hops[i] + 1;
                queue.push_back(j);
            }
        }
    }
    order.sort_by_key(|&k| {
        let c = &s.constraints[k];
        (hops[c.i].min(hops[c.j]), hops[c.i].max(hops[c.j]))
    });
    order
}

fn solve_soft(s: &mut SoftBody, fixed: &[bool], targets: &[(usize, Vec3)], params: &SimParams) {
    let n = s.nodes.len();
    let dt = params.dt;
    let inv_mass: Vec<f64> = (0..n)
        .map(|i| if fixed[i] { 0.0 } else { 1.0 / s.masses[i] })
        .collect();

    let mut p = s.nodes.clone();
    for i in 0..n {
        if !fixed[i] {
            s.velocities[i] += params.gravity * dt;
            p[i] = s.nodes[i] + s.velocities[i] * dt;
        }
    }
    for &(i, target) in targets {
        p[i] = target;
    }

    let order = sweep_order(s, fixed);
    for _ in 0..params.solver_iters {
        for &k in &order {
            project(&mut p, &inv_mass, &s.constraints[k]);
        }
        project_ground(&mut p, &inv_mass);
    }
    let structural: Vec<DistanceConstraint> = order
        .iter()
        .map(|&k| s.constraints[k])
        .filter(|c| c.kind.is_structural())
        .map(|c| DistanceConstraint { stiffness: 1.0, ..c })
        .collect();
    let violation = |p: &[Vec3]| {
        structural
            .iter()
            .map(|c| ((p[c.i] - p[c.j]).norm() - c.rest_length).abs() / c.rest_length)
            .fold(0.0, f64::max)
    };
    let mut extra = 0;
    while extra < params.max_extra_iters && violation(&p) > params.tolerance {
        for c in &structural {
            project(&mut p, &inv_mass, c);
        }
        project_ground(&mut p, &inv_mass);
        extra += 1;
    }

    let keep = 1.0 - params.damping;
    for i in 0..n {
        if fixed[i] {
            s.velocities[i] = if s.pinned.contains(&i) {
                Vec3::zeros()
            } else {
                (p[i] - s.nodes[i]) / dt
            };
        } else {
            let mut v = (p[i] - s.nodes[i]) / dt * keep;
            if p[i].z <= CONTACT_EPS {
                v.x *= 1.0 - params.ground_friction;
                v.y *= 1.0 - params.ground_friction;
                v.z = v.z.max(0.0);
            }
            s.velocities[i] = v;
        }
        s.nodes[i] = p[i];
    }
}

/// Pure form of [`World::step`].
pub fn step(world: &World, action: &TimedAction) -> Result<World> {
    let mut next = world.clone();
    next.step(action)?;
    Ok(next)
}

pub fn observe(world: &World, object_id: &str) -> Result<DeformableConfig> {
    world.observe(object_id)
}

/// Builds the initial world for `spec` from its initial-state sampler.
pub fn reset(spec: &TaskSpec, seed: u64) -> World {
    spec.sample_world(seed)
}
