//! Source demonstrations, segmentation and the segment library.
//!
//! A demo file is JSON Lines: one header object followed by one action per
//! line.
//!
//! ```text
//! {"schema":"softgen/v1","kind":"demo","task_id":"rope_u","annotations":[61],"objects":{"0":"rope","1":"rope"},"snapshots":{"0":[[x,y,z],...]}}
//! {"t":0,"p":[x,y,z],"q":[w,x,y,z],"g":0}
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::registration::DeformableConfig;
use crate::warp::{ActionRecord, TimedAction, TrajectorySegment};
use crate::SCHEMA;

/// Segments shorter than this are merged into a neighbor by the heuristic.
pub const MIN_SEGMENT_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SourceDemo {
    pub task_id: String,
    pub actions: Vec<TimedAction>,
    /// Object state at the start of each subtask.
    pub object_snapshots: BTreeMap<usize, DeformableConfig>,
    /// Step indices at which a new segment begins.
    pub annotations: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    Annotated,
    Heuristic,
}

impl std::str::FromStr for SegmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "annotated" => Ok(Self::Annotated),
            "heuristic" => Ok(Self::Heuristic),
            other => Err(Error::InvalidInput(format!("unknown segment mode `{other}`"))),
        }
    }
}

/// Index ranges of each segment.
pub fn segment_bounds(demo: &SourceDemo, mode: SegmentMode) -> Result<Vec<(usize, usize)>> {
    let n = demo.actions.len();
    if n == 0 {
        return Err(Error::EmptySegment(0));
    }
    match mode {
        SegmentMode::Annotated => {
            let ann = demo.annotations.as_ref().ok_or(Error::MissingAnnotations)?;
            let mut cuts = vec![0];
            for &b in ann {
                if b == 0 || b >= n || b <= *cuts.last().unwrap() {
                    return Err(Error::EmptySegment(b));
                }
                cuts.push(b);
            }
            cuts.push(n);
            Ok(cuts.windows(2).map(|w| (w[0], w[1])).collect())
        }
        SegmentMode::Heuristic => Ok(heuristic_bounds(&demo.actions)),
    }
}

/// Splits at every gripper transition, then folds pieces shorter than
/// [`MIN_SEGMENT_LEN`] into their successor (the last one into its
/// predecessor).
fn heuristic_bounds(actions: &[TimedAction]) -> Vec<(usize, usize)> {
    let mut pieces = Vec::new();
    let mut start = 0;
    for k in 1..actions.len() {
        if actions[k].gripper != actions[k - 1].gripper {
            pieces.push((start, k));
            start = k;
        }
    }
    pieces.push((start, actions.len()));

    let mut out: Vec<(usize, usize)> = Vec::new();
    let mut carry: Option<usize> = None;
    let last = pieces.len() - 1;
    for (k, &(a, b)) in pieces.iter().enumerate() {
        let a = carry.take().unwrap_or(a);
        if b - a < MIN_SEGMENT_LEN && k != last {
            carry = Some(a);
        } else {
            out.push((a, b));
        }
    }
    if out.len() > 1 {
        let (a, b) = out[out.len() - 1];
        if b - a < MIN_SEGMENT_LEN {
            out.pop();
            out.last_mut().unwrap().1 = b;
        }
    }
    out
}

pub fn segment_demo(demo: &SourceDemo, mode: SegmentMode) -> Result<Vec<TrajectorySegment>> {
    segment_bounds(demo, mode)?
        .into_iter()
        .enumerate()
        .map(|(k, (a, b))| {
            let start_config = demo
                .object_snapshots
                .get(&k)
                .cloned()
                .ok_or(Error::MissingSnapshot(k))?;
            Ok(TrajectorySegment {
                actions: demo.actions[a..b].to_vec(),
                subtask_index: k,
                start_config,
            })
        })
        .collect()
}

/// Segments of every source demo, indexed `[subtask][demo]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLibrary {
    pub task_id: String,
    pub segments: Vec<Vec<TrajectorySegment>>,
    pub subtask_object_ids: Vec<String>,
}

impl SegmentLibrary {
    pub fn num_subtasks(&self) -> usize {
        self.segments.len()
    }

    pub fn num_demos(&self) -> usize {
        self.segments.first().map_or(0, Vec::len)
    }
}

pub fn build_library(demos: &[SourceDemo], mode: SegmentMode) -> Result<SegmentLibrary> {
    let first = demos
        .first()
        .ok_or_else(|| Error::InvalidInput("no source demos".into()))?;
    let mut segments: Vec<Vec<TrajectorySegment>> = Vec::new();
    let mut object_ids: Vec<String> = Vec::new();
    for demo in demos {
        if demo.task_id != first.task_id {
            return Err(Error::InvalidInput(format!(
                "demos mix tasks `{}` and `{}`",
                first.task_id, demo.task_id
            )));
        }
        let segs = segment_demo(demo, mode)?;
        if segments.is_empty() {
            object_ids = segs.iter().map(|s| s.start_config.object_id.clone()).collect();
            segments = vec![Vec::new(); segs.len()];
        } else if segs.len() != segments.len() {
            return Err(Error::InconsistentSubtaskCount(segments.len(), segs.len()));
        }
        for (k, s) in segs.into_iter().enumerate() {
            if s.start_config.object_id != object_ids[k] {
                return Err(Error::InconsistentObject {
                    subtask: k,
                    a: object_ids[k].clone(),
                    b: s.start_config.object_id,
                });
            }
            segments[k].push(s);
        }
    }
    Ok(SegmentLibrary {
        task_id: first.task_id.clone(),
        segments,
        subtask_object_ids: object_ids,
    })
}

#[derive(Serialize, Deserialize)]
struct DemoHeader {
    schema: String,
    #[serde(default)]
    kind: Option<String>,
    task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotations: Option<Vec<usize>>,
    #[serde(default)]
    objects: BTreeMap<usize, String>,
    #[serde(default)]
    snapshots: BTreeMap<usize, Vec<[f64; 3]>>,
}

pub fn write_demo<W: Write>(demo: &SourceDemo, mut out: W) -> Result<()> {
    let header = DemoHeader {
        schema: SCHEMA.into(),
        kind: Some("demo".into()),
        task_id: demo.task_id.clone(),
        annotations: demo.annotations.clone(),
        objects: demo
            .object_snapshots
            .iter()
            .map(|(k, c)| (*k, c.object_id.clone()))
            .collect(),
        snapshots: demo
            .object_snapshots
            .iter()
            .map(|(k, c)| (*k, c.nodes.iter().map(|n| [n.x, n.y, n.z]).collect()))
            .collect(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for a in &demo.actions {
        serde_json::to_writer(&mut out, &ActionRecord::from(a))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a demo; snapshots whose object is not named in the header are
/// attributed to `default_object`.
pub fn read_demo<R: BufRead>(input: R, default_object: Option<&str>) -> Result<SourceDemo> {
    let mut lines = input.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::SchemaMismatch("empty demo file".into()))??;
    let header: DemoHeader = serde_json::from_str(&header_line)?;
    if header.schema != SCHEMA {
        return Err(Error::SchemaMismatch(format!(
            "demo schema `{}` (expected `{SCHEMA}`)",
            header.schema
        )));
    }
    let mut object_snapshots = BTreeMap::new();
    for (k, nodes) in header.snapshots {
        let object_id = header
            .objects
            .get(&k)
            .cloned()
            .or_else(|| default_object.map(str::to_string))
            .ok_or_else(|| Error::InvalidInput(format!("snapshot {k} names no object")))?;
        let nodes = nodes.into_iter().map(Vec3::from).collect();
        object_snapshots.insert(k, DeformableConfig::new(object_id, nodes));
    }
    let mut actions = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ActionRecord = serde_json::from_str(&line)?;
        actions.push(rec.to_action()?);
    }
    Ok(SourceDemo {
        task_id: header.task_id,
        actions,
        object_snapshots,
        annotations: header.annotations,
    })
}

pub fn save_demo(demo: &SourceDemo, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_demo(demo, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_demo(path: &Path, default_object: Option<&str>) -> Result<SourceDemo> {
    let f = std::fs::File::open(path)?;
    read_demo(std::io::BufReader::new(f), default_object)
}
