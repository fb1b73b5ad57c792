use std::fmt;

use thiserror::Error;

/// Pipeline step that produced a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Sample,
    Moments,
    Basis,
    Doe,
    Evaluate,
    Fit,
    Analyze,
    Reference,
    TopOpt,
    Read,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Sample => "sample",
            Stage::Moments => "moments",
            Stage::Basis => "basis",
            Stage::Doe => "doe",
            Stage::Evaluate => "evaluate",
            Stage::Fit => "fit",
            Stage::Analyze => "analyze",
            Stage::Reference => "reference",
            Stage::TopOpt => "topopt",
            Stage::Read => "read",
            Stage::Write => "write",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("[{stage}] {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl CliError {
    /// 2 for configuration problems, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 3,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            CliError::Config(_) => None,
            CliError::Stage { stage, .. } => Some(*stage),
        }
    }
}

/// Tag errors of a fallible step with its stage.
pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T, CliError>;
}

impl<T, E: std::error::Error + Send + Sync + 'static> StageExt<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, CliError> {
        self.map_err(|e| CliError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
