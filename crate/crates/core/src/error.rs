use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation not identifiable: second singular value {second:.3e} below tolerance {tolerance:.3e}")]
    RankDeficient { second: f64, tolerance: f64 },

    #[error("least-squares system ill-conditioned (condition {condition:.3e}, rank {rank})")]
    IllConditioned { condition: f64, rank: usize },

    #[error("acceleration system near-singular (condition {condition:.3e}); mount offsets must be distinct")]
    NearSingular { condition: f64 },

    #[error("joints moved {max_motion:.3e} rad during a log that must have locked joints")]
    LockedJointViolation { max_motion: f64 },

    #[error("signal of {len} samples is too short; at least {min} required")]
    SignalTooShort { len: usize, min: usize },

    #[error("cutoff {cutoff_hz} Hz outside (0, {nyquist_hz}) Hz")]
    InvalidCutoff { cutoff_hz: f64, nyquist_hz: f64 },

    #[error("covariance diverged: variance {variance:.3e} of state {index} exceeds ceiling")]
    CovarianceDivergence { index: usize, variance: f64 },

    #[error("no stable gain: lower search bound {lower} is already unstable")]
    NoStableGain { lower: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported log format version: {found}")]
    FormatVersionMismatch { found: String },

    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("timestamp decreases at line {line}")]
    NonMonotoneTimestamp { line: usize },

    #[error("step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag used on the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::RankDeficient { .. } => "rank_deficient",
            Error::IllConditioned { .. } => "ill_conditioned",
            Error::NearSingular { .. } => "near_singular",
            Error::LockedJointViolation { .. } => "locked_joint_violation",
            Error::SignalTooShort { .. } => "signal_too_short",
            Error::InvalidCutoff { .. } => "invalid_cutoff",
            Error::CovarianceDivergence { .. } => "covariance_divergence",
            Error::NoStableGain { .. } => "no_stable_gain",
            Error::InvalidModel(_) => "invalid_model",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidInput(_) => "invalid_input",
            Error::FormatVersionMismatch { .. } => "format_version_mismatch",
            Error::MalformedLine { .. } => "malformed_line",
            Error::NonMonotoneTimestamp { .. } => "non_monotone_timestamp",
            Error::Step { .. } => "step_failed",
            Error::Io(_) => "io",
        }
    }
}
