use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch (expected {expected}, got {actual})")]
    Shape {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("attention row has no valid key")]
    DegenerateRow,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("position {position} outside a mask over {len} positions")]
    IndexOutOfRange { position: usize, len: usize },
    #[error("expected new query at position {expected}, got {actual}")]
    SequenceGap { expected: usize, actual: usize },
    #[error("generated position {0} cannot be an image position")]
    GeneratedImagePosition(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(&'static str),
    #[error("{what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("position {position} exceeds max_seq_len {max}")]
    PositionOutOfRange { position: usize, max: usize },
    #[error("layer range {start}..{end} invalid for this cache or model")]
    LayerRange { start: usize, end: usize },
    #[error("text query row {0} has no valid key")]
    DegenerateRow(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("prompt is empty")]
    Empty,
    #[error("image position {position} outside prompt of length {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("token {token} at image position {position} is not an image token")]
    NotImageToken { position: usize, token: u32 },
    #[error("image positions must be strictly increasing")]
    Unsorted,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("prompt of {len} tokens exceeds max_seq_len {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("post-boundary depth {k} exceeds layer count {layers}")]
    InvalidBoundary { k: usize, layers: usize },
    #[error("alpha must be finite and >= 0, got {0}")]
    InvalidAlpha(f32),
    #[error("max_tokens must be >= 1")]
    InvalidMaxTokens,
    #[error("sequence would exceed max_seq_len {0}")]
    SequenceFull(usize),
    #[error("branch caches out of sync: {0}")]
    CacheDesync(&'static str),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("{what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("no data: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("scene spec: {0}")]
    Spec(&'static str),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at step {0}")]
    Diverged(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}
