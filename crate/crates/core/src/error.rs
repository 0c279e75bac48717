use alloc::string::String;

/// Errors raised by the numeric core and the model components built on it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("degenerate vector")]
    DegenerateVector,
    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),
    #[error("empty sequence in {0}")]
    EmptySequence(&'static str),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unmapped value {id} for feature `{feature}`")]
    UnmappedFeature { feature: String, id: u32 },
    #[error("unknown intent {0}")]
    UnknownIntent(u64),
    #[error("stale offline index: built for model {built:016x}, queried with {current:016x}")]
    StaleIndex { built: u64, current: u64 },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("empty candidate list")]
    EmptyCandidates,
    #[error("list length {0} is below the minimum of 2")]
    ListTooShort(usize),
    #[error("no relevant items in list")]
    NoRelevant,
    #[error("no eligible user (every user has single-class labels)")]
    NoEligibleUser,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("candidate set is missing teacher {0}")]
    MissingTeacher(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, expected: impl core::fmt::Display, found: impl core::fmt::Display) -> Error {
    use alloc::string::ToString;
    Error::Shape {
        op,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
