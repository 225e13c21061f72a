//! Generation loop: sample a start state, then for each subtask observe the
//! object, pick the closest source segment, adapt it, bridge to it and
//! execute; keep the trial if the task succeeds.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demos::SegmentLibrary;
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::registration::{fit_tps, rigid_register_with, DeformableConfig, RegistrationResult, RigidFrame, DEFAULT_LAMBDA};
use crate::simulator::World;
use crate::tasks::TaskSpec;
use crate::warp::{bridge, rigid_transform_segment, warp_segment, ActionRecord, InterpPolicy, TimedAction, TrajectorySegment};
use crate::SCHEMA;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Warp,
    Rigid,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warp" => Ok(Self::Warp),
            "rigid" => Ok(Self::Rigid),
            other => Err(Error::InvalidInput(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub task_id: String,
    pub method: Method,
    pub num_trials: usize,
    pub base_seed: u64,
    pub lambda: f64,
    pub n_interp_policy: InterpPolicy,
    #[serde(default)]
    pub keep_failures: bool,
    /// Start every trial from the canonical state instead of the sampler.
    #[serde(default)]
    pub canonical_start: bool,
}

impl GenerationConfig {
    pub fn new(task_id: impl Into<String>, method: Method, num_trials: usize, base_seed: u64) -> Self {
        Self {
            task_id: task_id.into(),
            method,
            num_trials,
            base_seed,
            lambda: DEFAULT_LAMBDA,
            n_interp_policy: InterpPolicy::default(),
            keep_failures: false,
            canonical_start: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_trials == 0 {
            return Err(Error::InvalidInput("num_trials must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub subtask_index: usize,
    /// Index of the first action (bridge included) of this subtask.
    #[serde(default)]
    pub start_step: usize,
    pub source_demo_index: usize,
    pub registration_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub schema: String,
    pub task_id: String,
    pub trial_index: usize,
    pub trial_seed: u64,
    #[serde(default)]
    pub canonical_start: bool,
    pub method: Method,
    pub success: bool,
    pub actions: Vec<ActionRecord>,
    pub segment_provenance: Vec<Provenance>,
    pub initial_snapshot: BTreeMap<String, DeformableConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

/// Fitted transform of a selected candidate.
#[derive(Debug, Clone)]
pub enum Fitted {
    Warp(Box<RegistrationResult>),
    Rigid(Pose),
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub demo_index: usize,
    pub segment: TrajectorySegment,
    pub fitted: Fitted,
    pub cost: f64,
}

/// Registration settings shared by every candidate of a selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Registrar {
    pub method: Method,
    pub lambda: f64,
    pub rigid_frame: RigidFrame,
}

impl Registrar {
    pub fn new(method: Method, lambda: f64) -> Self {
        Self {
            method,
            lambda,
            rigid_frame: RigidFrame::Kabsch,
        }
    }

    pub fn for_task(cfg: &GenerationConfig, spec: &TaskSpec) -> Self {
        Self {
            method: cfg.method,
            lambda: cfg.lambda,
            rigid_frame: spec.rigid_frame,
        }
    }

    /// Registers `candidate` onto `current` and returns the transform and cost.
    pub fn register(&self, candidate: &DeformableConfig, current: &DeformableConfig) -> Result<(Fitted, f64)> {
        match self.method {
            Method::Warp => {
                let r = fit_tps(candidate, current, self.lambda)?;
                let cost = r.cost;
                Ok((Fitted::Warp(Box::new(r)), cost))
            }
            Method::Rigid => {
                let (pose, cost) = rigid_register_with(candidate, current, self.rigid_frame)?;
                Ok((Fitted::Rigid(pose), cost))
            }
        }
    }
}

/// Lowest-cost source segment for `subtask`; ties go to the lower demo
/// index and candidates that fail to register are skipped.
pub fn select_source_segment(lib: &SegmentLibrary, subtask: usize, current: &DeformableConfig, reg: &Registrar) -> Result<Selection> {
    let candidates = lib
        .segments
        .get(subtask)
        .filter(|c| !c.is_empty())
        .ok_or_else(|| Error::InvalidInput(format!("library has no segments for subtask {subtask}")))?;
    let mut best: Option<Selection> = None;
    let mut last_err = None;
    for (k, seg) in candidates.iter().enumerate() {
        match reg.register(&seg.start_config, current) {
            Ok((fitted, cost)) if cost.is_finite() => {
                if best.as_ref().is_none_or(|b| cost < b.cost) {
                    best = Some(Selection {
                        demo_index: k,
                        segment: seg.clone(),
                        fitted,
                        cost,
                    });
                }
            }
            Ok(_) => last_err = Some(Error::NonConvergence(format!("candidate {k} has non-finite cost"))),
            Err(e) => last_err = Some(e),
        }
    }
    match (best, last_err) {
        (Some(b), _) => Ok(b),
        (None, Some(e)) if candidates.len() == 1 => Err(e),
        (None, _) => Err(Error::NoCandidate(candidates.len())),
    }
}

/// Carries the selected segment into the current scene.
pub fn adapt(selection: &Selection, current: &DeformableConfig) -> Result<TrajectorySegment> {
    match &selection.fitted {
        Fitted::Warp(r) => warp_segment(&r.field, &selection.segment, current),
        Fitted::Rigid(t) => Ok(rigid_transform_segment(t, &selection.segment)),
    }
}

/// Per-trial seed: a splitmix64-style avalanche of the base seed and index.
pub fn trial_seed(base_seed: u64, trial_index: u64) -> u64 {
    let mut z = base_seed ^ trial_index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn initial_world(spec: &TaskSpec, seed: u64, canonical: bool) -> World {
    if canonical {
        spec.canonical_world()
    } else {
        spec.sample_world(seed)
    }
}

fn snapshot_all(w: &World) -> BTreeMap<String, DeformableConfig> {
    w.bodies
        .keys()
        .filter_map(|id| w.observe(id).ok().map(|c| (id.clone(), c)))
        .collect()
}

/// Holds the last action for the settling horizon and evaluates success.
fn settle_and_check(w: &mut World, spec: &TaskSpec, last: Option<TimedAction>) -> Result<bool> {
    let hold = last.unwrap_or_else(|| TimedAction::new(0, w.gripper.pose, w.gripper.state));
    for _ in 0..spec.settle_steps {
        w.step(&hold)?;
    }
    Ok(spec.success(w))
}

pub fn generate_trial(cfg: &GenerationConfig, lib: &SegmentLibrary, spec: &TaskSpec, trial_index: usize) -> TrialRecord {
    let seed = trial_seed(cfg.base_seed, trial_index as u64);
    let mut world = initial_world(spec, seed, cfg.canonical_start);
    let mut record = TrialRecord {
        schema: SCHEMA.into(),
        task_id: spec.task_id.clone(),
        trial_index,
        trial_seed: seed,
        canonical_start: cfg.canonical_start,
        method: cfg.method,
        success: false,
        actions: Vec::new(),
        segment_provenance: Vec::new(),
        initial_snapshot: snapshot_all(&world),
        failure_reason: None,
    };
    let reg = Registrar::for_task(cfg, spec);
    let outcome = run_subtasks(cfg, &reg, lib, &mut world, &mut record).and_then(|last| settle_and_check(&mut world, spec, last));
    match outcome {
        Ok(true) => record.success = true,
        Ok(false) => record.failure_reason = Some("success predicate not satisfied".into()),
        Err(e) => record.failure_reason = Some(e.to_string()),
    }
    record
}

fn run_subtasks(cfg: &GenerationConfig, reg: &Registrar, lib: &SegmentLibrary, world: &mut World, record: &mut TrialRecord) -> Result<Option<TimedAction>> {
    let mut last = None;
    for subtask in 0..lib.num_subtasks() {
        let current = world.observe(&lib.subtask_object_ids[subtask])?;
        let selection = select_source_segment(lib, subtask, &current, reg)?;
        record.segment_provenance.push(Provenance {
            subtask_index: subtask,
            start_step: record.actions.len(),
            source_demo_index: selection.demo_index,
            registration_cost: selection.cost,
        });
        let adapted = adapt(&selection, &current)?;
        let from = world.gripper.pose;
        let first = adapted.first_pose().ok_or(Error::EmptySegment(subtask))?;
        let bridged = bridge(&from, &adapted, cfg.n_interp_policy.steps(&from, &first))?;
        for a in &bridged.actions {
            let mut a = *a;
            a.t = record.actions.len() as u64;
            let rec = ActionRecord::from(&a);
            let exec = rec.to_action()?;
            record.actions.push(rec);
            world.step(&exec)?;
            last = Some(exec);
        }
    }
    Ok(last)
}

/// Re-executes a record from its initial state and reports whether the
/// outcome matches the stored success flag.
pub fn replay_trial(record: &TrialRecord, spec: &TaskSpec) -> Result<bool> {
    if record.schema != SCHEMA {
        return Err(Error::SchemaMismatch(format!(
            "record schema `{}` (expected `{SCHEMA}`)",
            record.schema
        )));
    }
    if record.task_id != spec.task_id {
        return Err(Error::InvalidInput(format!(
            "record is for task `{}`, not `{}`",
            record.task_id, spec.task_id
        )));
    }
    let mut world = initial_world(spec, record.trial_seed, record.canonical_start);
    let complete = record.segment_provenance.len() == spec.num_subtasks();
    let mut run = || -> Result<bool> {
        let mut last = None;
        for rec in &record.actions {
            let a = rec.to_action()?;
            world.step(&a)?;
            last = Some(a);
        }
        settle_and_check(&mut world, spec, last)
    };
    let success = complete && run().unwrap_or(false);
    Ok(success == record.success)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: String,
    pub kind: String,
    pub config: GenerationConfig,
    pub task: TaskSpec,
    pub num_source_demos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub attempts: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub output: Option<String>,
}

/// Runs every trial on `workers` threads; results come back in trial order.
pub fn run_trials(cfg: &GenerationConfig, lib: &SegmentLibrary, spec: &TaskSpec, workers: usize) -> Result<Vec<TrialRecord>> {
    cfg.validate()?;
    if lib.task_id != spec.task_id || cfg.task_id != spec.task_id {
        return Err(Error::InvalidInput(format!(
            "task mismatch: config `{}`, library `{}`, spec `{}`",
            cfg.task_id, lib.task_id, spec.task_id
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(pool.install(|| {
        (0..cfg.num_trials)
            .into_par_iter()
            .map(|k| generate_trial(cfg, lib, spec, k))
            .collect()
    }))
}

pub fn write_dataset<W: Write>(header: &DatasetHeader, records: &[TrialRecord], mut out: W) -> Result<()> {
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<(Option<DatasetHeader>, Vec<TrialRecord>)> {
    let mut header = None;
    let mut records = Vec::new();
    for (k, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)?;
        let schema = value.get("schema").and_then(|s| s.as_str()).unwrap_or("");
        if schema != SCHEMA {
            return Err(Error::SchemaMismatch(format!("line {}: schema `{schema}`", k + 1)));
        }
        if k == 0 && value.get("kind").and_then(|s| s.as_str()) == Some("dataset") {
            header = Some(serde_json::from_value(value)?);
        } else {
            records.push(serde_json::from_value(value)?);
        }
    }
    Ok((header, records))
}

/// Generates `cfg.num_trials` trials and writes the kept records to `out`.
pub fn generate_dataset(cfg: &GenerationConfig, lib: &SegmentLibrary, spec: &TaskSpec, out: &Path, workers: usize) -> Result<DatasetSummary> {
    let records = run_trials(cfg, lib, spec, workers)?;
    let successes = records.iter().filter(|r| r.success).count();
    let kept: Vec<TrialRecord> = records.into_iter().filter(|r| r.success || cfg.keep_failures).collect();
    let header = DatasetHeader {
        schema: SCHEMA.into(),
        kind: "dataset".into(),
        config: cfg.clone(),
        task: spec.clone(),
        num_source_demos: lib.num_demos(),
    };
    let file = std::fs::File::create(out)?;
    let mut w = std::io::BufWriter::new(file);
    write_dataset(&header, &kept, &mut w)?;
    w.flush()?;
    Ok(DatasetSummary {
        attempts: cfg.num_trials,
        successes,
        success_rate: successes as f64 / cfg.num_trials as f64,
        output: Some(out.display().to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::{build_library, SegmentMode};
    use crate::geometry::Vec3;
    use crate::warp::GripperCommand;

    fn config(nodes: Vec<Vec3>) -> DeformableConfig {
        DeformableConfig::new("rope", nodes)
    }

    fn base() -> Vec<Vec3> {
        (0..10)
            .map(|i| {
                let t = i as f64;
                Vec3::new(0.02 * t, 0.01 * (0.9 * t).sin(), 0.005 * (1.7 * t).cos())
            })
            .collect()
    }

    fn library(starts: Vec<Vec<Vec3>>) -> SegmentLibrary {
        let seg = |nodes| TrajectorySegment {
            actions: vec![TimedAction::new(0, Pose::identity(), GripperCommand::Open)],
            subtask_index: 0,
            start_config: config(nodes),
        };
        SegmentLibrary {
            task_id: "rope_u".into(),
            segments: vec![starts.into_iter().map(seg).collect()],
            subtask_object_ids: vec!["rope".into()],
        }
    }

    #[test]
    fn selects_exact_match() {
        let b = base();
        let shifted: Vec<Vec3> = b.iter().map(|p| Vec3::new(p.x, p.y + 0.03 * p.x * p.x * 100.0, p.z)).collect();
        let other: Vec<Vec3> = b.iter().map(|p| Vec3::new(p.x, -p.y - 0.05 * p.x, p.z + 0.02 * p.x)).collect();
        let lib = library(vec![shifted, b.clone(), other]);
        for method in [Method::Warp, Method::Rigid] {
            let s = select_source_segment(&lib, 0, &config(b.clone()), &Registrar::new(method, 0.1)).unwrap();
            assert_eq!(s.demo_index, 1);
            assert!(s.cost <= 1e-9);
        }
    }

    #[test]
    fn single_candidate_is_taken() {
        let b = base();
        let far: Vec<Vec3> = b.iter().map(|p| p * 3.0 + Vec3::new(0.0, p.x * p.x * 10.0, 0.0)).collect();
        let lib = library(vec![far]);
        assert_eq!(select_source_segment(&lib, 0, &config(b), &Registrar::new(Method::Warp, 0.1)).unwrap().demo_index, 0);
    }

    #[test]
    fn smaller_deformation_wins() {
        let b = base();
        let bump = |amp: f64| -> Vec<Vec3> { b.iter().map(|p| p + Vec3::new(0.0, amp * (p.x * 30.0).sin(), 0.0)).collect() };
        let lib = library(vec![bump(0.005), bump(0.05)]);
        assert_eq!(select_source_segment(&lib, 0, &config(b.clone()), &Registrar::new(Method::Warp, 0.1)).unwrap().demo_index, 0);
        let lib = library(vec![bump(0.05), bump(0.005)]);
        assert_eq!(select_source_segment(&lib, 0, &config(b), &Registrar::new(Method::Warp, 0.1)).unwrap().demo_index, 1);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let b = base();
        let lib = library(vec![b.clone(), b.clone()]);
        assert_eq!(select_source_segment(&lib, 0, &config(b), &Registrar::new(Method::Warp, 0.1)).unwrap().demo_index, 0);
    }

    #[test]
    fn failing_candidates_are_skipped() {
        let b = base();
        let short = b[..5].to_vec();
        let lib = library(vec![short.clone(), b.clone()]);
        assert_eq!(select_source_segment(&lib, 0, &config(b.clone()), &Registrar::new(Method::Warp, 0.1)).unwrap().demo_index, 1);
        let lib = library(vec![short.clone(), short]);
        assert!(matches!(select_source_segment(&lib, 0, &config(b), &Registrar::new(Method::Warp, 0.1)), Err(Error::NoCandidate(2))));
    }

    #[test]
    fn seeds_are_spread() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|k| trial_seed(7, k)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(trial_seed(7, 0), trial_seed(8, 0));
    }

    #[test]
    fn canonical_trial_reproduces_source() {
        let spec = TaskSpec::cube_stack();
        let demo = crate::tasks::scripted_source_demo(&spec, 0).unwrap();
        let lib = build_library(std::slice::from_ref(&demo), SegmentMode::Annotated).unwrap();
        let mut cfg = GenerationConfig::new("cube_stack", Method::Warp, 1, 0);
        cfg.canonical_start = true;
        let rec = generate_trial(&cfg, &lib, &spec, 0);
        assert!(rec.success, "{:?}", rec.failure_reason);
        assert!(replay_trial(&rec, &spec).unwrap());
    }
}
