use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{what} = {value} is outside the allowed range {range}")]
    OutOfRange {
        what: &'static str,
        value: f64,
        range: String,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("time delay must be non-negative, got {0} s")]
    NegativeDelay(f64),

    #[error(
        "plan covers {covered_m:.1} m but the fiber is {fiber_m:.1} m long; at least {required} sections are required"
    )]
    Coverage {
        covered_m: f64,
        fiber_m: f64,
        required: usize,
    },

    #[error("inconsistent metadata while interleaving shifts: {0}")]
    Alignment(String),

    #[error("missing sections {0:?}")]
    MissingSections(Vec<usize>),

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("no peak above the noise floor")]
    NoPeak,

    #[error("spectrum peak sits on the frequency grid boundary")]
    PeakAtBoundary,

    #[error("plateaus around the edge are not distinguishable above noise")]
    EdgeNotResolved,

    #[error("frequency grid must be strictly increasing and uniform")]
    FrequencyGrid,

    #[error("pattern text parse error at line {line}: {reason}")]
    PatternParse { line: usize, reason: String },

    #[error("at {freq_mhz} MHz: {source}")]
    AtFrequency {
        freq_mhz: f64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub fn at_frequency(self, freq_mhz: f64) -> Self {
        Error::AtFrequency {
            freq_mhz,
            source: Box::new(self),
        }
    }
}
