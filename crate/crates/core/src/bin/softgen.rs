use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use softgen::demos::{build_library, load_demo, save_demo, SegmentLibrary, SegmentMode, SourceDemo};
use softgen::geometry::{Pose, Vec3};
use softgen::pipeline::{
    adapt, generate_dataset, replay_trial, select_source_segment, DatasetHeader, Fitted, GenerationConfig, Method, Registrar,
    TrialRecord,
};
use softgen::registration::{fit_tps, fit_tps_rpm, rigid_register, DeformableConfig, RpmParams, WarpField, DEFAULT_LAMBDA};
use softgen::tasks::{builtin_tasks, scripted_source_demo, task_by_id, TaskSpec};
use softgen::warp::{bridge, InterpPolicy};
use softgen::{Error, SCHEMA};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_SCHEMA: u8 = 4;

#[derive(Parser)]
#[command(name = "softgen", version, about = "Generate deformable-manipulation demonstrations by warping source trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of adapted trajectories
    Generate(GenerateArgs),
    /// Re-execute every record of a dataset and check its success flag
    Replay(ReplayArgs),
    /// Register two node configurations and dump the fitted field
    Register(RegisterArgs),
    /// Dump source and adapted poses of one trial with field samples
    WarpDump(WarpDumpArgs),
    /// Summarize registration costs and source usage of a dataset
    Stats(StatsArgs),
    /// Record scripted source demos to files
    RecordDemo(RecordDemoArgs),
    /// List built-in tasks, or print one task's spec
    Tasks(TasksArgs),
}

#[derive(Args)]
struct SourceArgs {
    /// Built-in task id
    #[arg(long)]
    task: Option<String>,
    /// Task spec JSON file (overrides --task)
    #[arg(long)]
    task_file: Option<PathBuf>,
    /// Source demo files, in library order
    #[arg(long, num_args = 1..)]
    demos: Vec<PathBuf>,
    /// Record source demos from the task's waypoint script
    #[arg(long)]
    scripted: bool,
    /// Number of scripted source demos
    #[arg(long, default_value_t = 1)]
    num_demos: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Annotated)]
    segment_mode: ModeArg,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Number of trials
    #[arg(long)]
    num: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Base seed, or `canonical` to start every trial from the canonical state
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Keep failed trials in the output
    #[arg(long)]
    keep_failures: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// JSON file with generation settings; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    dataset: PathBuf,
}

#[derive(Args)]
struct RegisterArgs {
    source: PathBuf,
    target: PathBuf,
    #[arg(long, value_enum, default_value_t = RegMethod::Tps)]
    method: RegMethod,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Probe points per axis over the source bounding box
    #[arg(long, default_value_t = 5)]
    grid: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WarpDumpArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Trial seed of the target scene
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = MethodArg::Warp)]
    method: MethodArg,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = 5)]
    grid: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    dataset: PathBuf,
    /// Histogram bins per subtask (log10 cost, one decade each)
    #[arg(long, default_value_t = 12)]
    bins: usize,
}

#[derive(Args)]
struct RecordDemoArgs {
    #[arg(long)]
    task: String,
    /// Demo seeds; 0 is the canonical scene
    #[arg(long, num_args = 1.., default_values_t = [0u64])]
    seeds: Vec<u64>,
    /// Output directory
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TasksArgs {
    task: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Warp,
    Rigid,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Warp => Method::Warp,
            MethodArg::Rigid => Method::Rigid,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Annotated,
    Heuristic,
}

impl From<ModeArg> for SegmentMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Annotated => SegmentMode::Annotated,
            ModeArg::Heuristic => SegmentMode::Heuristic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RegMethod {
    Tps,
    Rpm,
    Rigid,
}

/// Generation settings read from `--config`; every field is optional.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    task_id: Option<String>,
    method: Option<Method>,
    num_trials: Option<usize>,
    base_seed: Option<u64>,
    lambda: Option<f64>,
    n_interp_policy: Option<InterpPolicy>,
    keep_failures: Option<bool>,
    canonical_start: Option<bool>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => EXIT_IO,
            Error::SchemaMismatch(_) | Error::Json(_) => EXIT_SCHEMA,
            Error::InvalidInput(_)
            | Error::UnknownTask(_)
            | Error::UnknownObject(_)
            | Error::ShapeMismatch { .. }
            | Error::DegenerateInput(_)
            | Error::MissingAnnotations
            | Error::EmptySegment(_)
            | Error::MissingSnapshot(_)
            | Error::InconsistentSubtaskCount(..)
            | Error::InconsistentObject { .. } => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Register(a) => cmd_register(a),
        Command::WarpDump(a) => cmd_warp_dump(a),
        Command::Stats(a) => cmd_stats(a),
        Command::RecordDemo(a) => cmd_record_demo(a),
        Command::Tasks(a) => cmd_tasks(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn resolve_task(task: Option<&str>, task_file: Option<&Path>) -> CliResult<TaskSpec> {
    match (task_file, task) {
        (Some(path), _) => Ok(TaskSpec::from_json(&std::fs::read_to_string(path).map_err(Error::from)?)?),
        (None, Some(id)) => Ok(task_by_id(id)?),
        (None, None) => Err(usage("one of --task or --task-file is required")),
    }
}

fn load_library(src: &SourceArgs, spec: &TaskSpec) -> CliResult<SegmentLibrary> {
    let mode = SegmentMode::from(src.segment_mode);
    let demos: Vec<SourceDemo> = match (src.scripted, src.demos.is_empty()) {
        (true, true) => (0..src.num_demos.max(1))
            .map(|seed| scripted_source_demo(spec, seed))
            .collect::<softgen::Result<_>>()?,
        (false, false) => {
            let default_object = spec.subtask_objects.first().map(String::as_str);
            src.demos
                .iter()
                .map(|p| load_demo(p, default_object))
                .collect::<softgen::Result<_>>()?
        }
        (true, false) => return Err(usage("--scripted and --demos are mutually exclusive")),
        (false, true) => return Err(usage("source demos required: pass --demos FILE... or --scripted")),
    };
    if let Some(d) = demos.iter().find(|d| d.task_id != spec.task_id) {
        return Err(usage(format!("demo is for task `{}`, not `{}`", d.task_id, spec.task_id)));
    }
    Ok(build_library(&demos, mode)?)
}

fn parse_seed(raw: &str) -> CliResult<(u64, bool)> {
    if raw == "canonical" {
        return Ok((0, true));
    }
    raw.parse::<u64>()
        .map(|s| (s, false))
        .map_err(|_| usage(format!("invalid seed `{raw}` (expected an integer or `canonical`)")))
}

fn write_json(value: &Value, out: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n").map_err(Error::from)?,
        None => line(&text)?,
    }
    Ok(())
}

/// Writes one line to stdout; a closed pipe is not an error.
fn line(text: &str) -> CliResult<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::from(e).into()),
        _ => Ok(()),
    }
}

fn cmd_generate(a: GenerateArgs) -> CliResult<u8> {
    let file: ConfigFile = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(Error::from)?;
            serde_json::from_str(&text).map_err(|e| usage(format!("config file: {e}")))?
        }
        None => ConfigFile::default(),
    };
    let task_id = a.source.task.clone().or(file.task_id.clone());
    let spec = resolve_task(task_id.as_deref(), a.source.task_file.as_deref())?;

    let mut cfg = GenerationConfig::new(spec.task_id.clone(), Method::Warp, 1, 0);
    if let Some(m) = file.method {
        cfg.method = m;
    }
    if let Some(n) = file.num_trials {
        cfg.num_trials = n;
    }
    if let Some(s) = file.base_seed {
        cfg.base_seed = s;
    }
    if let Some(l) = file.lambda {
        cfg.lambda = l;
    }
    if let Some(p) = file.n_interp_policy {
        cfg.n_interp_policy = p;
    }
    if let Some(k) = file.keep_failures {
        cfg.keep_failures = k;
    }
    if let Some(c) = file.canonical_start {
        cfg.canonical_start = c;
    }
    if let Some(m) = a.method {
        cfg.method = m.into();
    }
    if let Some(n) = a.num {
        cfg.num_trials = n;
    }
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if a.keep_failures {
        cfg.keep_failures = true;
    }
    let seed = std::env::var("SOFTGEN_SEED").ok().or(a.seed.clone());
    if let Some(raw) = seed {
        let (s, canonical) = parse_seed(raw.trim())?;
        cfg.base_seed = s;
        cfg.canonical_start = canonical;
    }
    cfg.validate()?;

    let lib = load_library(&a.source, &spec)?;
    let start = Instant::now();
    let summary = generate_dataset(&cfg, &lib, &spec, &a.out, a.workers)?;
    let report = json!({
        "attempts": summary.attempts,
        "successes": summary.successes,
        "success_rate": summary.success_rate,
        "wall_time": start.elapsed().as_secs_f64(),
        "output": summary.output,
    });
    write_json(&report, None)?;
    Ok(0)
}

fn cmd_replay(a: ReplayArgs) -> CliResult<u8> {
    let file = std::fs::File::open(&a.dataset).map_err(Error::from)?;
    let mut spec: Option<TaskSpec> = None;
    let (mut total, mut consistent) = (0usize, 0usize);
    let mut bad = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::from)?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Option<Value> = serde_json::from_str(&line).ok();
        if let Some(v) = &value {
            let schema = v.get("schema").and_then(Value::as_str).unwrap_or("");
            if schema != SCHEMA {
                return Err(Error::SchemaMismatch(format!("line {}: schema `{schema}`", k + 1)).into());
            }
            if v.get("kind").and_then(Value::as_str) == Some("dataset") {
                let header: DatasetHeader = serde_json::from_value(v.clone()).map_err(Error::from)?;
                spec = Some(header.task);
                continue;
            }
        }
        total += 1;
        let trial = value
            .as_ref()
            .and_then(|v| v.get("trial_index"))
            .and_then(Value::as_u64)
            .map_or_else(|| format!("line {}", k + 1), |t| format!("trial {t}"));
        let record: Option<TrialRecord> = value.and_then(|v| serde_json::from_value(v).ok());
        let ok = match record {
            Some(r) => {
                let task = match &spec {
                    Some(s) if s.task_id == r.task_id => s.clone(),
                    _ => task_by_id(&r.task_id)?,
                };
                replay_trial(&r, &task).unwrap_or(false)
            }
            None => false,
        };
        if ok {
            consistent += 1;
        } else {
            bad.push(trial);
        }
    }
    for b in &bad {
        line(&format!("{b}: inconsistent"))?;
    }
    line(&format!("{consistent}/{total} consistent"))?;
    Ok(if bad.is_empty() { 0 } else { EXIT_FAILURE })
}

#[derive(Deserialize)]
struct ConfigInput {
    #[serde(default)]
    object_id: Option<String>,
    nodes: Vec<[f64; 3]>,
}

fn read_config(path: &Path) -> CliResult<DeformableConfig> {
    let text = std::fs::read_to_string(path).map_err(Error::from)?;
    let input: ConfigInput = serde_json::from_str(&text).map_err(Error::from)?;
    let cfg = DeformableConfig::new(
        input.object_id.unwrap_or_else(|| "object".into()),
        input.nodes.into_iter().map(Vec3::from).collect(),
    );
    cfg.validate()?;
    Ok(cfg)
}

fn probe_grid(points: &[Vec3], per_axis: usize) -> Vec<Vec3> {
    let n = per_axis.max(1);
    let lo = points.iter().fold(Vec3::repeat(f64::INFINITY), |m, p| m.inf(p));
    let hi = points.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |m, p| m.sup(p));
    let at = |k: usize, axis: usize| {
        if n == 1 {
            (lo[axis] + hi[axis]) / 2.0
        } else {
            lo[axis] + (hi[axis] - lo[axis]) * k as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                out.push(Vec3::new(at(i, 0), at(j, 1), at(k, 2)));
            }
        }
    }
    out
}

fn field_samples(field: &WarpField, points: &[Vec3], per_axis: usize) -> Value {
    let samples: Vec<Value> = probe_grid(points, per_axis)
        .iter()
        .map(|x| {
            let y = field.eval(x);
            json!({"x": [x.x, x.y, x.z], "f": [y.x, y.y, y.z]})
        })
        .collect();
    Value::Array(samples)
}

fn cmd_register(a: RegisterArgs) -> CliResult<u8> {
    let src = read_config(&a.source)?;
    let tgt = read_config(&a.target)?;
    let report = match a.method {
        RegMethod::Tps | RegMethod::Rpm => {
            let result = match a.method {
                RegMethod::Tps => fit_tps(&src, &tgt, a.lambda)?,
                _ => fit_tps_rpm(
                    &src,
                    &tgt,
                    &RpmParams {
                        lambda: a.lambda,
                        ..RpmParams::default()
                    },
                )?,
            };
            json!({
                "schema": SCHEMA,
                "method": if matches!(a.method, RegMethod::Tps) { "tps" } else { "rpm" },
                "cost": result.cost,
                "data_term": result.data_term,
                "residual": result.residual,
                "bending_energy": result.bending_energy,
                "lambda": result.lambda,
                "degenerate": result.degenerate,
                "regularized": result.regularized,
                "probe": field_samples(&result.field, &src.nodes, a.grid),
                "result": result,
            })
        }
        RegMethod::Rigid => {
            let (pose, cost) = rigid_register(&src, &tgt)?;
            let field = WarpField::from_pose(&pose);
            json!({
                "schema": SCHEMA,
                "method": "rigid",
                "cost": cost,
                "bending_energy": 0.0,
                "pose": pose,
                "probe": field_samples(&field, &src.nodes, a.grid),
            })
        }
    };
    write_json(&report, a.out.as_deref())?;
    Ok(0)
}

fn poses_json(poses: impl Iterator<Item = Pose>) -> Value {
    Value::Array(poses.map(|p| serde_json::to_value(p).unwrap_or(Value::Null)).collect())
}

fn cmd_warp_dump(a: WarpDumpArgs) -> CliResult<u8> {
    let spec = resolve_task(a.source.task.as_deref(), a.source.task_file.as_deref())?;
    let lib = load_library(&a.source, &spec)?;
    let reg = Registrar {
        method: a.method.into(),
        lambda: a.lambda,
        rigid_frame: spec.rigid_frame,
    };
    let policy = InterpPolicy::default();
    let mut world = spec.sample_world(a.seed);
    let mut subtasks = Vec::new();
    for k in 0..lib.num_subtasks() {
        let current = world.observe(&lib.subtask_object_ids[k])?;
        let selection = select_source_segment(&lib, k, &current, &reg)?;
        let adapted = adapt(&selection, &current)?;
        let field = match &selection.fitted {
            Fitted::Warp(r) => r.field.clone(),
            Fitted::Rigid(t) => WarpField::from_pose(t),
        };
        subtasks.push(json!({
            "subtask_index": k,
            "source_demo_index": selection.demo_index,
            "registration_cost": selection.cost,
            "source_config": selection.segment.start_config,
            "target_config": current,
            "source_poses": poses_json(selection.segment.actions.iter().map(|x| x.pose)),
            "adapted_poses": poses_json(adapted.actions.iter().map(|x| x.pose)),
            "probe": field_samples(&field, &selection.segment.start_config.nodes, a.grid),
        }));
        let from = world.gripper.pose;
        let first = adapted.first_pose().ok_or(Error::EmptySegment(k))?;
        for action in bridge(&from, &adapted, policy.steps(&from, &first))?.actions {
            world.step(&action)?;
        }
    }
    let report = json!({
        "schema": SCHEMA,
        "task_id": spec.task_id,
        "seed": a.seed,
        "success_after_execution": spec.success(&world),
        "subtasks": subtasks,
    });
    write_json(&report, a.out.as_deref())?;
    Ok(0)
}

fn cmd_stats(a: StatsArgs) -> CliResult<u8> {
    let file = std::fs::File::open(&a.dataset).map_err(Error::from)?;
    let (header, records) = softgen::pipeline::read_dataset(BufReader::new(file))?;
    let bins = a.bins.max(1);
    let mut costs: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut usage: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for r in &records {
        for p in &r.segment_provenance {
            costs.entry(p.subtask_index).or_default().push(p.registration_cost);
            *usage
                .entry(p.subtask_index)
                .or_default()
                .entry(p.source_demo_index)
                .or_insert(0) += 1;
        }
    }
    let subtasks: Vec<Value> = costs
        .iter()
        .map(|(k, c)| {
            // one decade per bin, ending at 1; smaller costs land in the first bin
            let mut counts = vec![0usize; bins];
            for &v in c {
                let decade = v.max(f64::MIN_POSITIVE).log10().floor();
                let idx = (decade + bins as f64).clamp(0.0, (bins - 1) as f64) as usize;
                counts[idx] += 1;
            }
            let edges: Vec<f64> = (0..=bins).map(|i| 10f64.powi(i as i32 - bins as i32)).collect();
            let n = c.len() as f64;
            json!({
                "subtask_index": k,
                "count": c.len(),
                "mean_cost": c.iter().sum::<f64>() / n,
                "min_cost": c.iter().copied().fold(f64::INFINITY, f64::min),
                "max_cost": c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                "histogram": {"edges": edges, "counts": counts},
                "source_usage": usage.get(k).cloned().unwrap_or_default(),
            })
        })
        .collect();
    let successes = records.iter().filter(|r| r.success).count();
    let attempts = header.as_ref().map_or(records.len(), |h| h.config.num_trials);
    let selections: usize = usage.values().flat_map(|m| m.values()).sum();
    let report = json!({
        "records": records.len(),
        "attempts": attempts,
        "successes": successes,
        "success_rate": if attempts == 0 { 0.0 } else { successes as f64 / attempts as f64 },
        "selections": selections,
        "subtasks": subtasks,
    });
    write_json(&report, None)?;
    Ok(0)
}

fn cmd_record_demo(a: RecordDemoArgs) -> CliResult<u8> {
    let spec = task_by_id(&a.task)?;
    std::fs::create_dir_all(&a.out_dir).map_err(Error::from)?;
    for seed in &a.seeds {
        let demo = scripted_source_demo(&spec, *seed)?;
        let path = a.out_dir.join(format!("{}_{seed}.jsonl", spec.task_id));
        save_demo(&demo, &path)?;
        line(&path.display().to_string())?;
    }
    std::io::stdout().flush().map_err(Error::from)?;
    Ok(0)
}

fn cmd_tasks(a: TasksArgs) -> CliResult<u8> {
    match a.task {
        Some(id) => line(&task_by_id(&id)?.to_json()?)?,
        None => {
            for t in builtin_tasks() {
                line(&format!("{}\t{} subtasks ({})", t.task_id, t.num_subtasks(), t.subtask_objects.join(", ")))?;
            }
        }
    }
    Ok(0)
}
