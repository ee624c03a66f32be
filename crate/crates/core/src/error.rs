use thiserror::Error;

/// Errors raised anywhere in the navigation engine.
#[derive(Debug, Error)]
pub enum NavError {
    #[error("input shape mismatch: {0}")]
    InputShape(String),

    #[error("invalid arguments: {0}")]
    InvalidArguments(String),

    /// A covariance stayed indefinite after the full jitter schedule.
    #[error("matrix not positive definite even with diagonal jitter {jitter:e}")]
    Conditioning { jitter: f64 },

    #[error("optimization diverged after {iterations} iterations (objective became non-finite)")]
    OptimizationDiverged { iterations: usize, last: Vec<f64> },

    #[error("rank-deficient regression: {0}")]
    RankDeficient(String),

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("scan has no usable readings")]
    NoMeasurement,

    #[error("series is empty")]
    NoData,

    #[error("time {t} outside series range [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("all particle weights vanished at step {step}")]
    DegenerateLikelihood { step: usize },

    #[error("waypoint leg {leg} is shorter than one step")]
    WaypointSpacing { leg: usize },

    #[error("trajectory lengths differ: estimate has {estimate} states, truth has {truth}")]
    Alignment { estimate: usize, truth: usize },

    #[error("internal consistency check failed: {0}")]
    InternalConsistency(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<NavError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl NavError {
    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn at_stage(self, stage: impl Into<String>) -> Self {
        NavError::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// True for failures caused by the data or by numerical conditioning,
    /// as opposed to malformed invocations.
    pub fn is_data_error(&self) -> bool {
        match self {
            NavError::Stage { source, .. } => source.is_data_error(),
            NavError::InvalidArguments(_) | NavError::InputShape(_) => false,
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, NavError>;
