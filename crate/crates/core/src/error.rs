use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("cannot normalize a zero-norm vector")]
    ZeroNorm,

    #[error("distance matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("margin ordering violated: need p < m1 < m2 < n, got p={p}, m1={m1}, m2={m2}, n={n}")]
    MarginOrder { p: f64, m1: f64, m2: f64, n: f64 },

    #[error("invalid margin configuration: {0}")]
    InvalidMargin(String),

    #[error("quadruplet sets overlap at pair ({0}, {1})")]
    OverlappingSets(usize, usize),

    #[error("invalid pair ({0}, {1}): {2}")]
    InvalidPair(usize, usize, &'static str),

    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("invalid transport problem: {0}")]
    InvalidProblem(String),

    #[error(
        "kernel underflow: exp(-lambda * cost) is zero on an entire row or column; \
         use a smaller lambda or enable log-domain mode"
    )]
    KernelUnderflow,

    #[error("no negatives available for row {0}")]
    EmptyNegatives(usize),

    #[error("missing noun/verb annotation on caption {0}")]
    AnnotationMissing(String),

    #[error("conflicting labels for pair ({0}, {1})")]
    LabelCollision(String, String),

    #[error("self pair ({0}, {0}) is not allowed")]
    SelfPair(String),

    #[error("class {0} out of range")]
    ClassOutOfRange(u32),

    #[error("invalid ring spec: {0}")]
    InvalidSpec(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("query {0} has no relevant gallery item")]
    NoRelevant(usize),

    #[error("all paired differences are zero")]
    DegenerateSample,

    #[error("need at least 3 non-zero differences, got {0}")]
    TooFewSamples(usize),

    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },

    #[error("duplicate id {0}")]
    DuplicateId(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("seed sets differ between reports")]
    SeedMismatch,

    #[error("io error: {0}")]
    Io(String),

    #[error("json error: {0}")]
    Json(String),
}

impl Error {
    /// Stable machine-readable identifier, used by the CLI and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::ZeroNorm => "zero_norm",
            Error::NotSquare { .. } => "not_square",
            Error::MarginOrder { .. } => "margin_order",
            Error::InvalidMargin(_) => "invalid_margin",
            Error::OverlappingSets(..) => "overlapping_sets",
            Error::InvalidPair(..) => "invalid_pair",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::InvalidProblem(_) => "invalid_problem",
            Error::KernelUnderflow => "kernel_underflow",
            Error::EmptyNegatives(_) => "empty_negatives",
            Error::AnnotationMissing(_) => "annotation_missing",
            Error::LabelCollision(..) => "label_collision",
            Error::SelfPair(_) => "self_pair",
            Error::ClassOutOfRange(_) => "class_out_of_range",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::Empty(_) => "empty",
            Error::NoRelevant(_) => "no_relevant",
            Error::DegenerateSample => "degenerate_sample",
            Error::TooFewSamples(_) => "too_few_samples",
            Error::Schema { .. } => "schema",
            Error::DuplicateId(_) => "duplicate_id",
            Error::Config(_) => "config",
            Error::SeedMismatch => "seed_mismatch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
