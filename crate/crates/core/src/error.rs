use std::fmt;

/// Pipeline stage tag attached to errors surfaced by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Simulate,
    Sweep,
    SelectMetrics,
    RankLevers,
    Train,
    Adapt,
    Explore,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Generate => "generate",
            Stage::Simulate => "simulate",
            Stage::Sweep => "sweep-configs",
            Stage::SelectMetrics => "select-metrics",
            Stage::RankLevers => "rank-levers",
            Stage::Train => "train",
            Stage::Adapt => "adapt",
            Stage::Explore => "sweep-explore",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("configuration rejected: {0}")]
    ForbiddenConfig(String),

    #[error("every row was removed: {0}")]
    EmptyResult(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("lasso did not converge at grid step {step} (lambda {lambda:.3e}) after {sweeps} sweeps, max update {max_delta:.3e}")]
    NonConvergence {
        step: usize,
        lambda: f64,
        sweeps: usize,
        max_delta: f64,
    },

    #[error("[{stage}] {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn in_stage(self, stage: Stage) -> Self {
        match self {
            already @ Error::Stage { .. } => already,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Extension for tagging a result with the stage that produced it.
pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
