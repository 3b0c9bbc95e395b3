//! Crate-wide error type.
//!
//! Every fallible operation in the crate returns [`enum@Error`]. Variants carry
//! enough location information (step, level, offending value) to reproduce the
//! failure from a report line.

use thiserror::Error;

/// Errors raised by lattice construction, problem validation, the transform,
/// the solver and the game modules.
#[derive(Debug, Error)]
pub enum Error {
    /// A grid was requested with a non-positive horizon or zero steps.
    #[error("invalid grid: horizon T = {horizon} must be positive and steps N = {steps} must be >= 1")]
    InvalidGrid { horizon: f64, steps: usize },

    /// A branch probability outside the open unit interval.
    #[error("invalid branch probability q = {q}: must lie strictly between 0 and 1")]
    InvalidProbability { q: f64 },

    /// A node coordinate outside the triangle `0 <= level <= step <= N`.
    #[error("node out of range: step {step}, level {level} (grid has {steps} steps)")]
    NodeOutOfRange { step: usize, level: usize, steps: usize },

    /// One-step operations need a successor step.
    #[error("no successor: node at terminal step {step} has no children")]
    NoSuccessor { step: usize },

    /// A field was queried past the last step it is defined on.
    #[error("field too short: step {step} requested but field ends at step {last_step}")]
    FieldTooShort { step: usize, last_step: usize },

    /// Stopping-rule enumeration guard.
    #[error("enumeration too large: {count} interior decision nodes exceeds the limit {max}")]
    EnumerationTooLarge { count: usize, max: usize },

    /// Structural validation of problem data failed.
    #[error("invalid problem data: {reason}")]
    InvalidProblem { reason: String },

    /// The barriers fail to bracket zero and no admissible shift process was supplied.
    #[error("no admissible shift: {reason}")]
    NoAdmissibleShift { reason: String },

    /// A growth-envelope or g-bound check failed at a concrete sample.
    #[error(
        "envelope violated at step {step}, level {level}: |{kind}| = {observed} exceeds bound {bound} at y = {y}, z = {z}"
    )]
    EnvelopeViolated {
        kind: &'static str,
        step: usize,
        level: usize,
        y: f64,
        z: f64,
        observed: f64,
        bound: f64,
    },

    /// No magnitude bound for the g-driver is known, so normalization cannot proceed.
    #[error("no g-envelope available: {reason}")]
    NoGBound { reason: String },

    /// A cumulative field (clock, forcing variation, running sup) takes
    /// different values along different paths to the same node.
    #[error("path-dependent m; use path oracle (first mismatch at step {step}, level {level}, gap {gap})")]
    PathDependentM { step: usize, level: usize, gap: f64 },

    /// The transformed clock increment differs across the two branches of a
    /// node, so the transformed instance is not solvable with predictable increments.
    #[error("branch-dependent transform increment at step {step}, level {level}: up {up} vs down {down}")]
    BranchDependentIncrement { step: usize, level: usize, up: f64, down: f64 },

    /// Inverse solution map applied to a nonpositive transformed value.
    #[error("inverse undefined: transformed value {value} at step {step}, level {level} is not strictly positive")]
    InverseUndefined { step: usize, level: usize, value: f64 },

    /// A candidate quadruple failed the solution identities.
    #[error("not a solution: {reason} (worst residual {residual} at step {step}, level {level})")]
    NotASolution { reason: String, residual: f64, step: usize, level: usize },

    /// The per-node implicit equation could not be solved to tolerance.
    #[error(
        "generator fixed point not found at step {step}, level {level}: residual {residual:e} after Picard and bisection"
    )]
    FixedPointNotFound { step: usize, level: usize, residual: f64 },

    /// Binomial market factors admit arbitrage.
    #[error("arbitrage in lattice parameters: need d < e^(r dt) < u, got d = {d}, growth = {growth}, u = {u}")]
    Arbitrage { d: f64, growth: f64, u: f64 },

    /// An ordered-pair requirement for the comparison theorem failed.
    #[error("pair not ordered: {reason} at step {step}, level {level} (gap {gap})")]
    PairNotOrdered { reason: String, step: usize, level: usize, gap: f64 },

    /// Expression-grammar parse failure.
    #[error("expression parse error at byte {position}: {reason}")]
    ExprParse { position: usize, reason: String },

    /// Expression evaluation referenced a symbol the current context does not bind.
    #[error("expression symbol `{symbol}` is not available in this context")]
    ExprSymbol { symbol: String },

    /// Malformed configuration document.
    #[error("invalid configuration: {reason}")]
    Config { reason: String },
}

impl Error {
    /// Convenience constructor for structural validation failures.
    pub fn invalid(reason: impl Into<String>) -> Self {
        Error::InvalidProblem { reason: reason.into() }
    }

    /// Convenience constructor for configuration failures.
    pub fn config(reason: impl Into<String>) -> Self {
        Error::Config { reason: reason.into() }
    }
}
