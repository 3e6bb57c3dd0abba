use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Diagnostics raised while parsing or transforming a network specification.
///
/// Every variant carries the 1-based line of the offending item when one
/// exists (0 for synthesized layers).
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("line {line}: syntax error: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown layer type `{kind}`")]
    UnknownLayerType { line: usize, kind: String },
    #[error("line {line}: duplicate layer name `{name}`")]
    DuplicateName { line: usize, name: String },
    #[error("line {line}: layer `{layer}` reads blob `{blob}` which no earlier layer or input produces")]
    DanglingBlob { line: usize, layer: String, blob: String },
    #[error("line {line}: blob `{blob}` is produced more than once")]
    DuplicateBlob { line: usize, blob: String },
    #[error("line {line}: gather layer `{layer}` has {tops} tops but its communication group has {group} members")]
    GatherArity { line: usize, layer: String, tops: usize, group: usize },
    #[error("line {line}: broadcast layer `{layer}` needs exactly 1 bottom and 1 top, found {bottoms} and {tops}")]
    BroadcastArity { line: usize, layer: String, bottoms: usize, tops: usize },
    #[error("line {line}: layer `{layer}`: {message}")]
    Arity { line: usize, layer: String, message: String },
    #[error("line {line}: layer `{layer}` is missing required field `{field}`")]
    MissingField { line: usize, layer: String, field: String },
    #[error("line {line}: invalid value for `{field}`: `{value}`")]
    InvalidValue { line: usize, field: String, value: String },
    #[error("line {line}: rank {rank} is outside world size {world_size}")]
    RankOutOfRange { line: usize, rank: usize, world_size: usize },
    #[error("line {line}: root rank {root} of layer `{layer}` is not in its communication group")]
    RootNotInGroup { line: usize, layer: String, root: usize },
    #[error("line {line}: layer `{layer}` has an empty communication group")]
    EmptyGroup { line: usize, layer: String },
    #[error("unknown split point `{0}`")]
    UnknownSplitPoint(String),
    #[error("split point `{0}` is not a parameterized layer")]
    SplitNotParameterized(String),
    #[error("base network is not a single chain: {0}")]
    NotAChain(String),
    #[error("pruning for rank {rank} orphans blob `{blob}` needed by layer `{layer}`")]
    OrphanedBlob { rank: usize, layer: String, blob: String },
    #[error("loss layers disagree on loss mode: `{0}` vs `{1}`")]
    MixedLossModes(String, String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("layer `{layer}`: shape mismatch, expected {expected:?}, got {actual:?}")]
    ShapeMismatch { layer: String, expected: Vec<usize>, actual: Vec<usize> },
    #[error("layer `{layer}`: {message}")]
    InvalidShape { layer: String, message: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward pass requested without a cached forward pass")]
    MissingCache,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("timed out waiting for {what} from rank {from}")]
    Timeout { what: String, from: usize },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
