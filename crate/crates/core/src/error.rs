use thiserror::Error;

use crate::init::InitEntry;

pub type Result<T, E = ScedError> = std::result::Result<T, E>;

/// Pipeline stage tag attached to wrapped errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    SeparationPenalty,
    PseudoLikelihood,
    Refinement,
    Selection,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Init => "initialization",
            Stage::SeparationPenalty => "separation penalty",
            Stage::PseudoLikelihood => "pseudo-likelihood",
            Stage::Refinement => "refinement",
            Stage::Selection => "selection",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum ScedError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("column {0} has zero variance")]
    ConstantColumn(usize),

    #[error("matrix is not symmetric positive definite")]
    NotSpd,

    #[error("scatter matrix is degenerate (smallest eigenvalue {0:e})")]
    DegenerateScatter(f64),

    #[error("cluster {0} is empty")]
    EmptyCluster(usize),

    #[error("too few points (n = {0}) for at least two initial clusters")]
    TooFewPoints(usize),

    #[error("pooled within-cluster variance is singular")]
    SingularPooledVariance { last: Option<Box<InitEntry>> },

    #[error("weight matrix W is singular")]
    SingularW,

    #[error("lambda grid is degenerate: every subject mean coincides with a center")]
    DegenerateGrid,

    #[error("cross-validation curve is flat; the sample is degenerate")]
    FlatCv,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<ScedError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ScedError {
    pub fn at(self, stage: Stage) -> ScedError {
        ScedError::Stage { stage, source: Box::new(self) }
    }

    /// Innermost error, unwrapping stage tags.
    pub fn root(&self) -> &ScedError {
        match self {
            ScedError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
