use std::path::PathBuf;

/// Every failure the toolkit can report. Variants are kept distinct so
/// callers (and the CLI exit-code mapping) can tell data problems from
/// numeric ones.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // image-corpus
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("unsupported PGM maxval {0} (only 255 is accepted)")]
    UnsupportedMaxval(u32),
    #[error("truncated PGM payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("manifest error at line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("requested {requested} training pairs but only {available} exist")]
    NTrainTooLarge { requested: usize, available: usize },

    // signal-kernels
    #[error("kernel {kernel_h}x{kernel_w} is larger than input {input_h}x{input_w}")]
    KernelLargerThanInput {
        kernel_h: usize,
        kernel_w: usize,
        input_h: usize,
        input_w: usize,
    },
    #[error("kernel {0}x{1} must be odd-sized in both dimensions")]
    EvenSizedKernel(usize, usize),
    #[error("image {width}x{height} is too small, need at least {min}x{min}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },
    #[error("variance window {0} must be odd and at least 3")]
    EvenWindow(usize),

    // distortion-metrics / embedding-simulator
    #[error("payload {0} bpp is outside the admissible range")]
    PayloadOutOfRange(f64),
    #[error("change probability {0} is outside [0, 1/3]")]
    OutOfRange(f64),
    #[error("every cost entry was excluded from the mean")]
    AllEntriesExcluded,
    #[error("empty binning range [{lo}, {hi}] or fewer than 2 bins")]
    EmptyRange { lo: f64, hi: f64 },
    #[error("payload cannot be embedded: every cell is wet")]
    PayloadInfeasible,
    #[error("bisection did not converge within {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    // cnn-steganalyzer
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("input size mismatch: {0}")]
    SizeMismatch(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },
    #[error("snapshot ring is empty")]
    EmptyRing,
    #[error("image {0} never appears in any test set")]
    ImageNeverInTest(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    // rich-ensemble
    #[error("within-class scatter is singular even after regularization")]
    SingularScatter,
    #[error("training set must contain both classes")]
    MissingClass,
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("feature cache is stale or malformed: {0}")]
    FeatureCache(String),

    // hybrid-selector
    #[error("empty input")]
    EmptyInput,
    #[error("curves do not share a binning or have fewer than 2 shared nonempty bins")]
    IncompatibleBinning,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than bad data or config.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::TrainingDiverged { .. }
                | Error::SingularScatter
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
