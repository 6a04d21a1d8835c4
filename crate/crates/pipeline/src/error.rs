use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: vip_core::Error,
    },

    #[error("stage {stage}: fit did not converge ({detail})")]
    NonConvergence { stage: &'static str, detail: String },

    #[error("stage {stage}: {path}: {source}")]
    Io {
        stage: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    kind: &'a str,
    stage: Option<&'a str>,
    exit_code: i32,
    message: String,
}

impl PipelineError {
    pub fn stage(stage: &'static str) -> impl FnOnce(vip_core::Error) -> Self {
        move |source| Self::Stage { stage, source }
    }

    pub fn io(stage: &'static str, path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { stage, path, source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Stage { .. } | Self::Io { .. } => 3,
            Self::NonConvergence { .. } => 4,
        }
    }

    pub fn stage_name(&self) -> Option<&'static str> {
        match self {
            Self::Config(_) => None,
            Self::Stage { stage, .. } | Self::NonConvergence { stage, .. } | Self::Io { stage, .. } => Some(stage),
        }
    }

    /// One-line JSON for stderr and the incomplete marker.
    pub fn to_json(&self) -> String {
        let kind = match self {
            Self::Config(_) => "config",
            Self::Stage { .. } => "stage",
            Self::NonConvergence { .. } => "non_convergence",
            Self::Io { .. } => "io",
        };
        serde_json::to_string(&ErrorRecord {
            kind,
            stage: self.stage_name(),
            exit_code: self.exit_code(),
            message: self.to_string(),
        })
        .expect("error record serialises")
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
