use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate matrix: {0}")]
    DegenerateMatrix(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("shape mismatch: source has {src} nodes, target has {tgt}")]
    ShapeMismatch { src: usize, tgt: usize },
    #[error("registration did not converge: {0}")]
    NonConvergence(String),
    #[error("numerical blowup at step {step}: {detail}")]
    NumericalBlowup { step: u64, detail: String },
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("demo has no segment annotations")]
    MissingAnnotations,
    #[error("segment boundary at step {0} produces an empty segment")]
    EmptySegment(usize),
    #[error("no object snapshot for subtask {0}")]
    MissingSnapshot(usize),
    #[error("demos disagree on subtask count: {0} vs {1}")]
    InconsistentSubtaskCount(usize, usize),
    #[error("subtask {subtask} mixes objects `{a}` and `{b}`")]
    InconsistentObject { subtask: usize, a: String, b: String },
    #[error("scripted demo for `{0}` did not succeed")]
    ScriptFailed(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("all {0} source candidates failed to register")]
    NoCandidate(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
