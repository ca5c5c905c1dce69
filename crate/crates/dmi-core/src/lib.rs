//! Disentangled multi-head video embeddings.
//!
//! The library trains a set of small perceptron heads that map a pooled
//! video-level feature vector into `k` sub-features plus one auxiliary
//! feature. Training combines a contrastive objective over labeled similar
//! pairs, a pairwise KL objective that pushes the sub-feature batch
//! distributions apart, and four variational mutual-information terms that
//! route label-relevant information into the auxiliary feature. Retrieval
//! ranks a gallery by exact cosine similarity over the concatenated
//! embedding, and the evaluation harness reports top-100 / top-inf mean
//! average precision against labeled pairs.
//!
//! Modules mirror the processing pipeline: [`corpus`] (data model and on-disk
//! formats), [`synth`] (deterministic synthetic corpora), [`heads`] (encoder
//! and critic parameters), [`numerics`] (shared math kernels), [`losses`]
//! (objectives with analytic gradients), [`trainer`] (optimization loop and
//! ablations), [`retrieval`] (cosine index), [`eval`] (metrics and exports),
//! and [`cli`] (command wiring for the `dmi` binary).

pub mod cli;
pub mod corpus;
pub mod eval;
pub mod heads;
pub mod losses;
pub mod mat;
pub mod numerics;
pub mod retrieval;
pub mod synth;
pub mod trainer;

use thiserror::Error;

/// Unified error type for every module surface.
///
/// Variants carry a human-readable detail string naming the offending
/// record, field, or file so callers can report actionable single-line
/// errors.
#[derive(Debug, Error)]
pub enum DmiError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("dangling pair id: {0}")]
    DanglingPairId(String),
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("invalid synth spec: {0}")]
    SpecInvalid(String),
    #[error("empty result: {0}")]
    EmptyResult(String),
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("batch too small: {0}")]
    BatchTooSmall(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("correlation out of range: {0}")]
    CorrelationOutOfRange(String),
    #[error("non-finite evaluation perturbing coordinate {0}")]
    NonFiniteEvaluation(usize),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("no negatives supplied")]
    NoNegatives,
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("insufficient positives: {0}")]
    InsufficientPositives(String),
    #[error("insufficient negatives: {0}")]
    InsufficientNegatives(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("unknown ablation variant: {0}")]
    UnknownVariant(String),
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("zero vector: {0}")]
    ZeroVector(String),
    #[error("duplicate ranked id: {0}")]
    DuplicateRankedId(String),
    #[error("no queries: {0}")]
    NoQueries(String),
    #[error("config error: {0}")]
    ConfigError(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DmiError>;

/// Deterministic 64-bit mix used to derive per-step and per-item seeds from
/// a master seed. SplitMix64 finalizer; stable across platforms.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
