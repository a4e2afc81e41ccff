use std::fmt;

use thiserror::Error;
use veristeer_core::CoreError;
use veristeer_nn::NnError;

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Pipeline stages, named after their CLI verbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenDemos,
    TrainPolicy,
    Collect,
    TrainVerifier,
    Eval,
    CrossSteer,
    Plot,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenDemos => "gen-demos",
            Stage::TrainPolicy => "train-policy",
            Stage::Collect => "collect",
            Stage::TrainVerifier => "train-verifier",
            Stage::Eval => "eval",
            Stage::CrossSteer => "cross-steer",
            Stage::Plot => "plot",
        }
    }

    /// Process exit code reported when this stage fails.
    pub fn exit_code(self) -> u8 {
        10 + self as u8
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Nn(#[from] NnError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot parse config: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("cannot render config: {0}")]
    ConfigRender(#[from] toml::ser::Error),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("nothing to plot: {0}")]
    EmptyPlot(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<HarnessError>,
    },
}

impl HarnessError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Stage that failed, if the error came out of one.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            HarnessError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

/// Runs `f`, tagging any error with `stage`.
pub(crate) fn in_stage<T>(stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        e @ HarnessError::Stage { .. } => e,
        e => HarnessError::Stage {
            stage,
            source: Box::new(e),
        },
    })
}
