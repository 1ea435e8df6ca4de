use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be scalar-shaped, got {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("training reached validation accuracy {accuracy:.4}, below target {target:.4}")]
    TrainingTargetMissed { accuracy: f64, target: f64 },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("requested {requested} examples but only {max_feasible} distinct ones exist")]
    Infeasible { requested: usize, max_feasible: usize },

    #[error("out-of-vocabulary word {0:?}")]
    OutOfVocabulary(String),

    #[error("non-finite gradient at reader {0}")]
    NonFiniteGradient(String),

    #[error("selection: {0}")]
    Selection(String),

    #[error("optimization diverged at step {step}")]
    Diverged { step: usize },

    #[error("circuit: {0}")]
    Circuit(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::Shape {
        op,
        shapes: shapes.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" vs "),
    }
}
