use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage a failure originated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Describe,
    Summarize,
    Generate,
    Augment,
    Filter,
    Infer,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Describe => "describe",
            Stage::Summarize => "summarize",
            Stage::Generate => "generate",
            Stage::Augment => "augment",
            Stage::Filter => "filter",
            Stage::Infer => "infer",
            Stage::Eval => "eval",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset layout error at {path}: {reason}")]
    Layout { path: PathBuf, reason: String },
    #[error("dataset at {0} contains no images")]
    EmptyDataset(PathBuf),
    #[error("few-shot sampling needs at least {needed} train-normal images, found {found}")]
    InsufficientNormals { needed: usize, found: usize },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("backend returned HTTP {status}: {message}")]
    BackendStatus { status: u16, message: String },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("no mock fixture for key `{0}`")]
    FixtureMissing(String),
    #[error("invalid fixture `{key}`: {reason}")]
    FixtureInvalid { key: String, reason: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("template error: {0}")]
    Template(String),
    #[error("expected {expected} {what}, got {got}")]
    Arity {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("no candidate questions could be parsed from the generation response")]
    EmptyCandidates,
    #[error("expected 5 sub-question variations, parsed {0}")]
    AugmentationCount(usize),
    #[error("no parseable answers for question `{0}` on the validation pool")]
    NoSignal(String),
    #[error("no questions survived filtering")]
    EmptyQuestionSet,
    #[error("invalid question set: {0}")]
    InvalidQuestionSet(String),

    #[error("vote undefined for main question {0}: no parseable sub-answers")]
    VoteUndefined(usize),
    #[error("anomaly score undefined: {0}")]
    ScoreUndefined(String),
    #[error("decision tokens could not be located in the response log-probabilities")]
    LogprobMissing,

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
    #[error("answer lists are misaligned: {left} vs {right} entries")]
    Alignment { left: usize, right: usize },
    #[error("cannot aggregate runs: {0}")]
    Aggregation(String),

    #[error("image `{image_id}`: {source}")]
    Image {
        image_id: String,
        #[source]
        source: Box<Error>,
    },
    #[error("stage {stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_stage(self, stage: Stage) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub fn for_image(self, image_id: impl Into<String>) -> Self {
        Error::Image {
            image_id: image_id.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, looking through stage and image wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::Image { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            Error::Image { source, .. } => source.stage(),
            _ => None,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) => 2,
            Error::Layout { .. }
            | Error::EmptyDataset(_)
            | Error::InsufficientNormals { .. }
            | Error::InvalidManifest(_) => 3,
            Error::BackendStatus { .. }
            | Error::Transport { .. }
            | Error::FixtureMissing(_)
            | Error::FixtureInvalid { .. }
            | Error::MalformedResponse(_) => 4,
            Error::EmptyQuestionSet => 5,
            _ => 1,
        }
    }
}

pub(crate) trait IoContext<T> {
    fn at_path(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::result::Result<T, std::io::Error> {
    fn at_path(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_look_through_wrappers() {
        let e = Error::FixtureMissing("k".into())
            .for_image("img")
            .at_stage(Stage::Describe);
        assert_eq!(e.exit_code(), 4);
        assert_eq!(e.stage(), Some(Stage::Describe));
        assert!(e.to_string().contains("describe"));
        assert_eq!(Error::EmptyQuestionSet.exit_code(), 5);
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::EmptyDataset("/x".into()).exit_code(), 3);
    }

    #[test]
    fn stage_is_not_double_wrapped() {
        let e = Error::EmptyCandidates
            .at_stage(Stage::Generate)
            .at_stage(Stage::Infer);
        assert_eq!(e.stage(), Some(Stage::Generate));
    }
}
