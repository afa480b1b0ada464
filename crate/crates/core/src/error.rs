use std::path::PathBuf;

/// Errors produced anywhere in the transmission stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{context}: dimension mismatch (expected {expected}, got {got})")]
    DimMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },

    #[error("{stage} diverged at {unit} {index} (loss = {loss})")]
    Diverged {
        stage: String,
        unit: &'static str,
        index: usize,
        loss: f64,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("stale or mismatched forward cache: {0}")]
    StaleCache(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("knowledge-base projection did not converge after {steps} steps (last bias {last_bias:.3e}, d(P,Lm) = {dist_to_mean:.6}, d(P,L') = {dist_to_filtered:.6})")]
    ProjectionExhausted {
        steps: usize,
        last_candidate: Vec<f64>,
        last_bias: f64,
        dist_to_mean: f64,
        dist_to_filtered: f64,
    },

    #[error("config{}, key `{key}`: {reason}", config_location(.line))]
    Config {
        /// 1-based; 0 when the key is absent from the document.
        line: usize,
        key: String,
        reason: String,
    },

    #[error("missing prerequisite {what}; run `{run_first}` first")]
    MissingPrerequisite { what: String, run_first: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

fn config_location(line: &usize) -> String {
    if *line == 0 {
        String::new()
    } else {
        format!(" line {line}")
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dims(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimMismatch {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
