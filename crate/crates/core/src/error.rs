use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: time length mismatch ({left} vs {right})")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss does not depend on any parameter that requires a gradient")]
    DetachedLoss,

    #[error("d_model {d_model} is not divisible by {heads} heads")]
    HeadDivisibility { d_model: usize, heads: usize },

    #[error("fusion mechanism {mechanism} is missing parameter {param}")]
    MissingParam {
        mechanism: &'static str,
        param: &'static str,
    },

    #[error("input of length {got} is too short, need at least {required} frames")]
    InputTooShort { required: usize, got: usize },

    #[error("LoRA rank mismatch: {0}")]
    RankMismatch(String),

    #[error("CTC target needs at least {required} frames but only {frames} are available")]
    InfeasibleCtc { frames: usize, required: usize },

    #[error("index {index} out of range for size {bound}")]
    IndexOutOfRange { index: usize, bound: usize },

    #[error("sequence of length {len} exceeds the context window of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("unknown language code {0:?}")]
    UnknownLanguage(String),

    #[error("utterance {index} lasts {seconds} s, more than the batch budget of {max_seconds} s")]
    OversizedUtterance {
        index: usize,
        seconds: f64,
        max_seconds: f64,
    },

    #[error("gradient contains non-finite values")]
    NonFiniteGradient,

    #[error("training diverged in stage {stage} at epoch {epoch}: loss is not finite")]
    Diverged { stage: String, epoch: usize },

    #[error("unknown parameter group {0:?}")]
    UnknownGroup(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing eval report in {0}")]
    MissingReport(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
