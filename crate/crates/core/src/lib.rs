//! Numerical laboratory for doubly reflected generalized BSDEs on a recombining
//! binomial lattice.
//!
//! The object of study is the quadruple `(Y, Z, K⁺, K⁻)` solving
//!
//! ```text
//! Y_t = ξ + ∫_t^T f(s, Y_s, Z_s) ds + ∫_t^T g(s, Y_s) dA_s + ∫_t^T dR_s
//!         + (K⁺_T − K⁺_t) − (K⁻_T − K⁻_t) − ∫_t^T Z_s dB_s ,
//! L_t ≤ Y_t ≤ U_t ,      ∫ (Y − L) dK⁺ = ∫ (U − Y) dK⁻ = 0 ,
//! ```
//!
//! with `K⁺`, `K⁻` nondecreasing and mutually singular. The generator `f` may
//! grow quadratically in `z`, the barriers are only required to be separated by
//! a semimartingale, and the equation carries a nondecreasing clock `A` and a
//! bounded-variation forcing `R`.
//!
//! On the lattice every ingredient of the continuous theory has an exact
//! discrete counterpart, which turns the structure theorems into machine-checkable
//! identities:
//!
//! * [`lattice`] — the recombining binomial substrate: exact one-step
//!   conditional expectations, exact one-step martingale representation, and
//!   exhaustive enumeration of adapted stopping rules on small horizons.
//! * [`problem`] — problem data (drivers, barriers, clock/forcing, growth
//!   envelopes), the JSON configuration catalog, structural validators, the
//!   barrier shift and the g-normalization reductions.
//! * [`transform`] — the exponential change of variables that converts a
//!   quadratic-growth instance into a bounded one confined to a positive band
//!   below `e⁻¹`, together with the exact solution maps in both directions.
//! * [`solver`] — the backward scheme: explicit in `z`, implicit in `y` via a
//!   damped fixed point with bisection fallback, reflection after the fixed
//!   point. Produces nodewise-exact Skorohod and singularity identities and an
//!   exact one-step pathwise identity on both branches.
//! * [`regularize`] — Lipschitz sup-convolution approximants and truncation
//!   clocks, plus the doubly indexed approximation ladder whose monotonicity
//!   evidences maximality of the constructed solution.
//! * [`games`] — the zero-generator specialisation: Dynkin games under a
//!   nondecreasing utility (value, optimal rules, exhaustive saddle check) and
//!   game-option pricing on a binomial market with an exact replicating hedge.
//! * [`compare`] — ordered pairs of instances and the comparison theorem's
//!   conclusions (nodewise value ordering, reflection-increment ordering on
//!   coinciding barriers).
//! * [`catalog`] — named instances used across the test suite and the seeded
//!   random-instance generators behind the batch verification modes.
//!
//! All tolerances used by the verification suites are pinned as constants in
//! the modules that own them; batch generators are deterministic given a seed.

pub mod catalog;
pub mod compare;
pub mod error;
pub mod expr;
pub mod games;
pub mod lattice;
pub mod problem;
pub mod regularize;
pub mod solver;
pub mod transform;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
