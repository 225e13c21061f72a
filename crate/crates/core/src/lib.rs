//! Trajectory transfer for deformable-object manipulation.
//!
//! Source demonstrations are split into object-centric segments. For a new
//! scene, each segment is carried over by a thin-plate-spline warp fitted
//! between the object's node configurations (or, as a baseline, by a single
//! rigid transform), bridged from the current gripper pose and executed in a
//! small position-based-dynamics world. Trials that satisfy the task's
//! success predicate are written out as a dataset.

pub mod demos;
pub mod error;
pub mod geometry;
pub mod pipeline;
pub mod registration;
pub mod simulator;
pub mod tasks;
pub mod warp;

pub use error::{Error, Result};

/// Tag carried by every file this crate reads or writes.
pub const SCHEMA: &str = "softgen/v1";
