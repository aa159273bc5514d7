//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: attribute `{attr}` out of range (got {value})")]
    AttrOutOfRange {
        op: &'static str,
        attr: &'static str,
        value: i64,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("node does not belong to this tape")]
    DetachedNode,

    #[error("missing gradient for parameter `{name}`")]
    MissingGradient { name: String },

    #[error("invalid class count {0}, need at least 2")]
    InvalidClassCount(usize),

    #[error("gate length mismatch at gated layer {layer}: expected {expected}, got {got}")]
    GateLengthMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("image size {size} too small for minimum shape extent {min}")]
    ImageTooSmall { size: usize, min: usize },

    #[error("{file}: bad magic, expected {expected:?}")]
    BadMagic { file: String, expected: [u8; 4] },

    #[error("{file}: unsupported version {found}, expected {expected}")]
    VersionMismatch {
        file: String,
        expected: u32,
        found: u32,
    },

    #[error("{file}: truncated: {detail}")]
    Truncated { file: String, detail: String },

    #[error("{file}: inconsistent header: {detail}")]
    HeaderInconsistency { file: String, detail: String },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("class {class}: balanced epoch needs {need} off-class samples, only {available} available")]
    BalancedSamplerShortfall {
        class: usize,
        need: usize,
        available: usize,
    },

    #[error("class {0} absent from dataset")]
    MissingClass(usize),

    #[error("missing subnetwork bundle for class {0}")]
    MissingClassBundle(usize),

    #[error("signature row for class {class} is zero; cosine distance undefined")]
    ZeroSignatureRow { class: usize },

    #[error("n_clusters {requested} out of range 1..={max}")]
    ClusterCountOutOfRange { requested: usize, max: usize },

    #[error("power iteration did not converge after {max_iters} iterations (residual {residual:.3e})")]
    PowerIterationDiverged { max_iters: usize, residual: f64 },

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("ground-truth masks unavailable: {0}")]
    MissingGroundTruth(String),

    #[error("covariance factorization failed at layer {layer} (delta {delta:.3e})")]
    FactorizationFailed { layer: String, delta: f64 },

    #[error("detector mode mismatch: stats fitted for {stats}, scoring requested {requested}")]
    ModeMismatch {
        stats: &'static str,
        requested: &'static str,
    },

    #[error("detector training fold contains a single label")]
    SingleLabelFold,

    #[error("AUROC requires nonempty positive and negative score sets")]
    EmptyScoreSet,

    #[error("attack `{attack}`: only {successful} successful samples (rate {rate:.3}), need at least {required}")]
    AttackSuccessTooLow {
        attack: String,
        successful: usize,
        required: usize,
        rate: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
