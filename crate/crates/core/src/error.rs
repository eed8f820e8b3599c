use thiserror::Error;

use crate::integrator::Trajectory;
use crate::orbit::OrbitFamily;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Model,
    Integrator,
    Continuation,
    NoGrazing,
    Analysis,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("model evaluation failed at t = {t}: {what}")]
    ModelEvaluation { t: f64, what: String },

    #[error("impact requested with y1 = {y1} >= 0; the state is not approaching the wall")]
    NotApproaching { y1: f64 },

    #[error("step size underflow at t = {t} (state {state:?})")]
    StepUnderflow { t: f64, state: Vec<f64> },

    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },

    #[error("step budget of {max_steps} exhausted at t = {t}")]
    StepBudget { t: f64, max_steps: usize },

    #[error("root bracket failure on [{lo}, {hi}]")]
    BracketFailure { lo: f64, hi: f64 },

    #[error("degenerate grazing at t = {t}: f1 vanishes exactly at the tangency")]
    DegenerateTangency { t: f64 },

    #[error("{source}")]
    Simulation {
        #[source]
        source: Box<Error>,
        partial: Box<Trajectory>,
    },

    #[error("approach speed {y} is below the grazing tolerance {graze_tol}; saltation is singular")]
    NearGrazing { y: f64, graze_tol: f64 },

    #[error("orbit is not transversal at t = {t}: {what}")]
    NotTransversal { t: f64, what: String },

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonFailure { iterations: usize, residual: f64 },

    #[error("impact count changed from {expected} to {found} during Newton iteration")]
    StructuralChange {
        expected: usize,
        found: usize,
        iterate: Vec<f64>,
    },

    #[error("continuation stalled at mu = {mu} (step {step:e})")]
    ContinuationStall {
        mu: f64,
        step: f64,
        partial: Box<OrbitFamily>,
    },

    #[error("non-grazing bifurcation at mu = {mu}: impact count {from} -> {to} with Y0 = {y0}")]
    Bifurcation {
        mu: f64,
        from: usize,
        to: usize,
        y0: f64,
    },

    #[error("no grazing detected: {0}")]
    NoGrazing(String),

    #[error("degenerate grazing: phi0 = {phi0} is not positive")]
    DegenerateGrazing { phi0: f64 },

    #[error("extrapolation did not converge: spread {spread:e} exceeds {limit:e}")]
    Extrapolation { spread: f64, limit: f64 },

    #[error("matrix is not hyperbolic (margin {margin:e})")]
    NonHyperbolic { margin: f64 },

    #[error("eigenvalue pairing is ambiguous: {0}")]
    PairingAmbiguity(String),

    #[error("orbit escaped (norm {norm:e}) after {iterations} periods")]
    Escape { norm: f64, iterations: usize },

    #[error("orbit is sticking-dominated ({fraction:.3} of periods constrained)")]
    StickingDominated {
        fraction: f64,
        constrained_exponent: f64,
    },

    #[error("local manifold validation failed: residual {residual:e} > {limit:e}")]
    ManifoldValidation { residual: f64, limit: f64 },

    #[error("undefined reduced matrix: {0}")]
    Undefined(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            InvalidInput(_) => ErrorClass::Input,
            ModelEvaluation { .. } | NotApproaching { .. } => ErrorClass::Model,
            StepUnderflow { .. }
            | NonFinite { .. }
            | StepBudget { .. }
            | BracketFailure { .. }
            | DegenerateTangency { .. } => ErrorClass::Integrator,
            Simulation { source, .. } => source.class(),
            ContinuationStall { .. } | Bifurcation { .. } => ErrorClass::Continuation,
            NoGrazing(_) => ErrorClass::NoGrazing,
            _ => ErrorClass::Analysis,
        }
    }

    /// Strip a `Simulation` wrapper, returning the underlying cause.
    pub fn root(&self) -> &Error {
        match self {
            Error::Simulation { source, .. } => source.root(),
            other => other,
        }
    }
}
