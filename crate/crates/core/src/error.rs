use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Internal,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("run {run_id}: cannot read {path}: {source}")]
    RunFile {
        run_id: String,
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed JSON in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("empty experiment: manifest lists no runs")]
    EmptyExperiment,

    #[error("stream not time ordered: {violations} decreasing timestamps exceed the tolerance of {tolerance}")]
    Unordered { violations: usize, tolerance: usize },

    #[error("pulse numbering is ambiguous: {0}")]
    SyncAmbiguous(String),

    #[error("synchronization failed: {0}")]
    SyncFailure(String),

    #[error("correlation undefined: no coincidences at setting ({alpha_deg}, {beta_deg})")]
    UndefinedCorrelation { alpha_deg: f64, beta_deg: f64 },

    #[error("CHSH schedule incomplete: no correlation for setting ({alpha_deg}, {beta_deg})")]
    MissingSetting { alpha_deg: f64, beta_deg: f64 },

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Json { .. } => ErrorKind::Config,
            Error::Stage { source, .. } | Error::RunFile { source, .. } => source.kind(),
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::EmptyExperiment
            | Error::Unordered { .. }
            | Error::SyncAmbiguous(_)
            | Error::SyncFailure(_)
            | Error::UndefinedCorrelation { .. }
            | Error::MissingSetting { .. }
            | Error::Domain(_)
            | Error::InsufficientData(_) => ErrorKind::Data,
        }
    }
}
