use thiserror::Error;

/// Errors raised by the simulation kernels.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("quadrature did not converge: achieved error estimate {estimate:.3e} (requested {requested:.3e})")]
    Quadrature { estimate: f64, requested: f64 },

    #[error("rate table covers t <= {covered} ps, requested t = {requested} ps")]
    RateTableRange { covered: f64, requested: f64 },

    #[error("step at t = {time} ps failed: {reason}")]
    Step { time: f64, reason: String },

    #[error(transparent)]
    Positivity(Box<PositivityViolation>),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

/// Diagnostic of an unphysical (positivity violating) evolution detected by
/// the jump ensemble: a negative-rate channel requires members to leave a
/// source state that holds none.
#[derive(Debug, Clone, Error)]
#[error(
    "positivity violation at t = {time:.6} ps: channel site {site} ω = {omega_cm:.4} cm⁻¹ \
     needs {expected_flow:.4e} members/step from a source holding {source_count}"
)]
pub struct PositivityViolation {
    pub time: f64,
    /// Site of the channel, zero-based.
    pub site: usize,
    pub omega_cm: f64,
    pub rate: f64,
    /// Target state in the exciton basis as (re, im) pairs.
    pub target: Vec<(f64, f64)>,
    /// Source state the negative jump would draw from.
    pub source_state: Vec<(f64, f64)>,
    pub source_count: u64,
    pub expected_flow: f64,
}

impl From<PositivityViolation> for Error {
    fn from(v: PositivityViolation) -> Self {
        Error::Positivity(Box::new(v))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
