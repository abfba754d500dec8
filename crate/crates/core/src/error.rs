use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SmaliError {
    #[error("missing .class directive")]
    MissingClass,
    #[error("line {line}: method `{name}` has no matching .end method")]
    UnterminatedMethod { line: usize, name: String },
    #[error("line {line}: .end method outside of a method")]
    StrayEndMethod { line: usize },
    #[error("line {line}: malformed .method header")]
    MalformedMethod { line: usize },
    #[error("{}: {source}", path.display())]
    InFile {
        path: PathBuf,
        source: Box<SmaliError>,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric undefined for an empty manifest")]
    EmptyManifest,
    #[error("weights must lie in [0, 1] and sum to 1, got ({0}, {1}, {2})")]
    InvalidWeights(f64, f64, f64),
    #[error("site {0}: injected instruction count must be at least 1")]
    EmptySite(usize),
}

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("opcode id {id} at position {position} is outside the vocabulary of {vocabulary}")]
    IdOutOfRange {
        id: u32,
        position: usize,
        vocabulary: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(u8),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("no injectable methods within the analysed horizon")]
    EmptyTemplate,
    #[error("attack variant {0} has no placeholders to optimize")]
    UnsupportedVariant(String),
    #[error("assignment covers {got} placeholders, template has {expected}")]
    AssignmentLength { expected: usize, got: usize },
    #[error("empty candidate set")]
    NoCandidates,
    #[error("opcode id {0} is not an injectable payload opcode")]
    NotInjectable(u32),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("no methods were injected: empty manifest")]
    EmptyManifest,
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Smali(#[from] SmaliError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}
