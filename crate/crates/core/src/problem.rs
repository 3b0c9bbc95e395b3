//! Problem data for a doubly reflected generalized BSDE instance on the
//! lattice, the JSON configuration catalog, structural validators and the two
//! data reductions (barrier shift, g-normalization).
//!
//! An instance consists of
//!
//! * a time-`z` driver `f(t, ·, y, z)` with growth envelope
//!   `|f| ≤ η + (C/2)|z|²` on the barrier band,
//! * a clock driver `g(t, ·, y)` with `|g| ≤ 1` on the band,
//! * barriers `L ≤ U` (either may be an infinite sentinel, which disables the
//!   corresponding reflection), an optional separating semimartingale `S` with
//!   `L ≤ S ≤ U`,
//! * a terminal condition `ξ` with `L_T ≤ ξ ≤ U_T`,
//! * a nondecreasing clock `A` and a bounded-variation forcing `R = R⁺ − R⁻`,
//!   both entering through *predictable* per-step increments attached to the
//!   parent node — the convention that makes the solver's one-step pathwise
//!   identity exact on both branches,
//! * the envelope processes `η ≥ 0` (per step) and `C ≥ 0` (per node), which
//!   are declared by the driver catalog or supplied explicitly, never
//!   estimated.
//!
//! The configuration layer ([`ProblemConfig`]) is a serde mirror of the JSON
//! schema documented in `configs/schema.md`; building it realizes every node
//! field on a concrete grid, so the same configuration can be re-gridded for
//! refinement studies.

use crate::error::Error;
use crate::expr::{Bindings, Expr, Symbol};
use crate::lattice::{AdaptedField, BranchMeasure, Node, TimeGrid};
use crate::solver::LatticeSolution;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

/// Slack used when checking declared growth envelopes at sampled points.
pub const ENVELOPE_TOL: f64 = 1e-12;

/// Band sampling is clipped to `[-BAND_CLIP, BAND_CLIP]` when a barrier is an
/// infinite sentinel.
pub const BAND_CLIP: f64 = 1e3;

// ───────────────────────────── evaluation context ─────────────────────────

/// Evaluation context handed to drivers and node functions: the node and its
/// `(t, B)` coordinates.
#[derive(Debug, Clone, Copy)]
pub struct StepCtx {
    pub node: Node,
    pub t: f64,
    pub b: f64,
}

// ─────────────────────────────── coefficients ─────────────────────────────

/// A scalar coefficient that may depend on `(t, B)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coef {
    /// Constant value.
    Const(f64),
    /// Formula in `t` and `B`.
    Formula(Expr),
}

impl Coef {
    /// Evaluates at a node context.
    pub fn eval(&self, ctx: &StepCtx) -> f64 {
        match self {
            Coef::Const(v) => *v,
            Coef::Formula(e) => e
                .eval(&Bindings::node(ctx.t, ctx.b))
                .expect("coefficient symbols validated at construction"),
        }
    }

    fn validate_symbols(&self, context: &str) -> Result<()> {
        if let Coef::Formula(e) = self {
            e.require_only(&[Symbol::T, Symbol::B], context)?;
        }
        Ok(())
    }
}

// ────────────────────────────────── drivers ───────────────────────────────

type DynF = Arc<dyn Fn(&StepCtx, f64, f64) -> f64 + Send + Sync>;
type DynG = Arc<dyn Fn(&StepCtx, f64) -> f64 + Send + Sync>;

/// Generator `f(t, ·, y, z)`.
#[derive(Clone)]
pub enum DriverF {
    /// `f ≡ 0`.
    Zero,
    /// `f ≡ value`.
    Constant(f64),
    /// `f = a·y + b·z`.
    Linear { a: f64, b: f64 },
    /// `f = −(c/2)·|z|²` with `c ≥ 0`, possibly time/state dependent.
    QuadraticZ { c: Coef },
    /// Formula over `t, B, y, z`.
    Formula(Expr),
    /// Programmatic driver (not serializable); `label` names it in debug output.
    Custom { label: &'static str, f: DynF },
}

impl DriverF {
    /// Builds a formula driver, rejecting symbols outside `t, B, y, z`.
    pub fn formula(expr: Expr) -> Result<Self> {
        expr.require_only(&[Symbol::T, Symbol::B, Symbol::Y, Symbol::Z], "driver f")?;
        Ok(DriverF::Formula(expr))
    }

    /// Evaluates the driver.
    pub fn eval(&self, ctx: &StepCtx, y: f64, z: f64) -> f64 {
        match self {
            DriverF::Zero => 0.0,
            DriverF::Constant(v) => *v,
            DriverF::Linear { a, b } => a * y + b * z,
            DriverF::QuadraticZ { c } => -0.5 * c.eval(ctx) * z * z,
            DriverF::Formula(e) => e
                .eval(&Bindings::node(ctx.t, ctx.b).with_y(y).with_z(z))
                .expect("driver symbols validated at construction"),
            DriverF::Custom { f, .. } => f(ctx, y, z),
        }
    }

    /// True when the driver never reads `y`. The scheme is explicit in `z`,
    /// so a y-free driver lets the solver skip the fixed-point iteration.
    pub fn is_state_free(&self) -> bool {
        match self {
            DriverF::Zero | DriverF::Constant(_) | DriverF::QuadraticZ { .. } => true,
            DriverF::Linear { a, .. } => *a == 0.0,
            DriverF::Formula(e) => !e.symbols().contains(&Symbol::Y),
            DriverF::Custom { .. } => false,
        }
    }
}

impl fmt::Debug for DriverF {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriverF::Zero => write!(f, "DriverF::Zero"),
            DriverF::Constant(v) => write!(f, "DriverF::Constant({v})"),
            DriverF::Linear { a, b } => write!(f, "DriverF::Linear {{ a: {a}, b: {b} }}"),
            DriverF::QuadraticZ { c } => write!(f, "DriverF::QuadraticZ {{ c: {c:?} }}"),
            DriverF::Formula(e) => write!(f, "DriverF::Formula({e})"),
            DriverF::Custom { label, .. } => write!(f, "DriverF::Custom({label})"),
        }
    }
}

/// Clock driver `g(t, ·, y)`.
#[derive(Clone)]
pub enum DriverG {
    /// `g ≡ 0`.
    Zero,
    /// `g ≡ value`.
    Constant(f64),
    /// `g = a·y + b`.
    Linear { a: f64, b: f64 },
    /// Formula over `t, B, y`.
    Formula(Expr),
    /// Programmatic driver with an optional magnitude bound on the band.
    Custom { label: &'static str, g: DynG, bound: Option<f64> },
}

impl DriverG {
    /// Builds a formula driver, rejecting symbols outside `t, B, y`.
    pub fn formula(expr: Expr) -> Result<Self> {
        expr.require_only(&[Symbol::T, Symbol::B, Symbol::Y], "driver g")?;
        Ok(DriverG::Formula(expr))
    }

    /// Evaluates the driver.
    pub fn eval(&self, ctx: &StepCtx, y: f64) -> f64 {
        match self {
            DriverG::Zero => 0.0,
            DriverG::Constant(v) => *v,
            DriverG::Linear { a, b } => a * y + b,
            DriverG::Formula(e) => e
                .eval(&Bindings::node(ctx.t, ctx.b).with_y(y))
                .expect("driver symbols validated at construction"),
            DriverG::Custom { g, .. } => g(ctx, y),
        }
    }

    /// True when the driver never reads `y`.
    pub fn is_state_free(&self) -> bool {
        match self {
            DriverG::Zero | DriverG::Constant(_) => true,
            DriverG::Linear { a, .. } => *a == 0.0,
            DriverG::Formula(e) => !e.symbols().contains(&Symbol::Y),
            DriverG::Custom { .. } => false,
        }
    }

    /// A magnitude bound for `|g|` over `y` with `|y| ≤ band_mag`, when the
    /// catalog can supply one.
    pub fn magnitude_bound(&self, band_mag: f64) -> Option<f64> {
        match self {
            DriverG::Zero => Some(0.0),
            DriverG::Constant(v) => Some(v.abs()),
            DriverG::Linear { a, b } => {
                if *a == 0.0 {
                    Some(b.abs())
                } else if band_mag.is_finite() {
                    Some(a.abs() * band_mag + b.abs())
                } else {
                    None
                }
            }
            DriverG::Formula(_) => None,
            DriverG::Custom { bound, .. } => *bound,
        }
    }
}

impl fmt::Debug for DriverG {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriverG::Zero => write!(f, "DriverG::Zero"),
            DriverG::Constant(v) => write!(f, "DriverG::Constant({v})"),
            DriverG::Linear { a, b } => write!(f, "DriverG::Linear {{ a: {a}, b: {b} }}"),
            DriverG::Formula(e) => write!(f, "DriverG::Formula({e})"),
            DriverG::Custom { label, .. } => write!(f, "DriverG::Custom({label})"),
        }
    }
}

// ─────────────────────────────── node functions ───────────────────────────

type DynNodeFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// A deterministic node function `(t, B) ↦ value` used for barriers,
/// separators and terminal conditions.
#[derive(Clone)]
pub enum NodeFn {
    /// Constant value (may be `±∞` as a sentinel barrier).
    Constant(f64),
    /// `intercept + slope·B`.
    AffineB { intercept: f64, slope: f64 },
    /// Formula over `t, B`.
    Formula(Expr),
    /// Programmatic node function (not serializable).
    Custom { label: &'static str, f: DynNodeFn },
}

impl NodeFn {
    /// Builds a formula node function, rejecting symbols outside `t, B`.
    pub fn formula(expr: Expr) -> Result<Self> {
        expr.require_only(&[Symbol::T, Symbol::B], "node function")?;
        Ok(NodeFn::Formula(expr))
    }

    /// Evaluates at `(t, B)`.
    pub fn eval(&self, t: f64, b: f64) -> f64 {
        match self {
            NodeFn::Constant(v) => *v,
            NodeFn::AffineB { intercept, slope } => intercept + slope * b,
            NodeFn::Formula(e) => e
                .eval(&Bindings::node(t, b))
                .expect("node-function symbols validated at construction"),
            NodeFn::Custom { f, .. } => f(t, b),
        }
    }

    /// Realizes the function as a node field up to `last_step`.
    pub fn realize(&self, grid: &TimeGrid, last_step: usize) -> AdaptedField {
        AdaptedField::from_fn(last_step, |node| self.eval(grid.time(node.step), node.brownian(grid)))
    }
}

impl fmt::Debug for NodeFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeFn::Constant(v) => write!(f, "NodeFn::Constant({v})"),
            NodeFn::AffineB { intercept, slope } => {
                write!(f, "NodeFn::AffineB {{ intercept: {intercept}, slope: {slope} }}")
            }
            NodeFn::Formula(e) => write!(f, "NodeFn::Formula({e})"),
            NodeFn::Custom { label, .. } => write!(f, "NodeFn::Custom({label})"),
        }
    }
}

// ──────────────────────────── realized instances ──────────────────────────

/// A fully realized problem instance on a concrete grid: what the solver,
/// transform and game modules consume.
///
/// Invariants are established by [`ProblemSpec::validate`], which every
/// constructor in this crate runs; direct field mutation is possible (the
/// fields are public laboratory data) but then re-validation is the caller's
/// responsibility.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub grid: TimeGrid,
    pub measure: BranchMeasure,
    pub driver_f: DriverF,
    pub driver_g: DriverG,
    /// Lower barrier on every node (may be `−∞`).
    pub low: AdaptedField,
    /// Upper barrier on every node (may be `+∞`).
    pub up: AdaptedField,
    /// Optional separating semimartingale with `L ≤ S ≤ U`.
    pub separator: Option<AdaptedField>,
    /// Terminal values `ξ(j)` at step `N`.
    pub terminal: Vec<f64>,
    /// Predictable clock increments `ΔA ≥ 0` on steps `0..N`.
    pub da: AdaptedField,
    /// Predictable forcing increments, nondecreasing part.
    pub dr_plus: AdaptedField,
    /// Predictable forcing increments, nonincreasing part.
    pub dr_minus: AdaptedField,
    /// Envelope `η ≥ 0` per step node.
    pub eta: AdaptedField,
    /// Envelope `C ≥ 0` per node (all steps).
    pub cap_c: AdaptedField,
}

impl ProblemSpec {
    /// Assembles and validates an instance from realized parts.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        grid: TimeGrid,
        measure: BranchMeasure,
        driver_f: DriverF,
        driver_g: DriverG,
        low: AdaptedField,
        up: AdaptedField,
        separator: Option<AdaptedField>,
        terminal: Vec<f64>,
        da: AdaptedField,
        dr_plus: AdaptedField,
        dr_minus: AdaptedField,
        eta: AdaptedField,
        cap_c: AdaptedField,
    ) -> Result<Self> {
        let spec = ProblemSpec {
            grid,
            measure,
            driver_f,
            driver_g,
            low,
            up,
            separator,
            terminal,
            da,
            dr_plus,
            dr_minus,
            eta,
            cap_c,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Evaluation context of a node.
    pub fn ctx(&self, node: Node) -> StepCtx {
        StepCtx { node, t: self.grid.time(node.step), b: node.brownian(&self.grid) }
    }

    /// Signed forcing increment `ΔR = ΔR⁺ − ΔR⁻` at a step node.
    pub fn dr(&self, node: Node) -> f64 {
        self.dr_plus.get(node) - self.dr_minus.get(node)
    }

    /// Structural validation: grid consistency of every field, `L ≤ U` with a
    /// nonempty band, terminal values inside the terminal band, nonnegative
    /// clock/forcing/envelope increments, and finiteness of everything except
    /// the barrier sentinels.
    pub fn validate(&self) -> Result<()> {
        let n = self.grid.steps();
        for (name, field, want) in [
            ("barrier L", &self.low, n),
            ("barrier U", &self.up, n),
            ("clock increment dA", &self.da, n - 1),
            ("forcing increment dR+", &self.dr_plus, n - 1),
            ("forcing increment dR-", &self.dr_minus, n - 1),
            ("envelope eta", &self.eta, n - 1),
            ("envelope C", &self.cap_c, n),
        ] {
            if field.last_step() != want {
                return Err(Error::invalid(format!(
                    "{name} is defined up to step {} but the grid needs step {want}",
                    field.last_step()
                )));
            }
        }
        if let Some(s) = &self.separator {
            if s.last_step() != n {
                return Err(Error::invalid(format!(
                    "separator S is defined up to step {} but the grid needs step {n}",
                    s.last_step()
                )));
            }
        }
        if self.terminal.len() != n + 1 {
            return Err(Error::invalid(format!(
                "terminal condition has {} values but step {n} has {} nodes",
                self.terminal.len(),
                n + 1
            )));
        }
        for step in 0..=n {
            for node in self.grid.nodes_at(step) {
                let l = self.low.get(node);
                let u = self.up.get(node);
                if l.is_nan() || u.is_nan() {
                    return Err(Error::invalid(format!(
                        "barrier is NaN at step {}, level {}",
                        node.step, node.level
                    )));
                }
                if l > u {
                    return Err(Error::invalid(format!(
                        "barriers cross at step {}, level {}: L = {l} > U = {u}",
                        node.step, node.level
                    )));
                }
                if let Some(s) = &self.separator {
                    let sv = s.get(node);
                    if !sv.is_finite() || sv < l || sv > u {
                        return Err(Error::invalid(format!(
                            "separator S = {sv} leaves the band [{l}, {u}] at step {}, level {}",
                            node.step, node.level
                        )));
                    }
                }
                let c = self.cap_c.get(node);
                if !c.is_finite() || c < 0.0 {
                    return Err(Error::invalid(format!(
                        "envelope C = {c} at step {}, level {} must be finite and >= 0",
                        node.step, node.level
                    )));
                }
                if step < n {
                    let da = self.da.get(node);
                    if !da.is_finite() || da < 0.0 {
                        return Err(Error::invalid(format!(
                            "clock increment dA = {da} at step {}, level {} must be finite and >= 0",
                            node.step, node.level
                        )));
                    }
                    for (name, f) in
                        [("dR+", &self.dr_plus), ("dR-", &self.dr_minus), ("eta", &self.eta)]
                    {
                        let v = f.get(node);
                        if !v.is_finite() || v < 0.0 {
                            return Err(Error::invalid(format!(
                                "{name} = {v} at step {}, level {} must be finite and >= 0",
                                node.step, node.level
                            )));
                        }
                    }
                }
            }
        }
        for (level, &xi) in self.terminal.iter().enumerate() {
            let node = Node { step: n, level };
            if !xi.is_finite() {
                return Err(Error::invalid(format!("terminal value at level {level} is {xi}")));
            }
            let l = self.low.get(node);
            let u = self.up.get(node);
            if xi < l || xi > u {
                return Err(Error::invalid(format!(
                    "terminal value {xi} at level {level} leaves the terminal band [{l}, {u}]"
                )));
            }
        }
        Ok(())
    }

    /// Largest barrier magnitude over all nodes (infinite when a sentinel
    /// barrier is present).
    pub fn band_magnitude(&self) -> f64 {
        self.low.max_abs().max(self.up.max_abs())
    }

    /// True when neither barrier uses an infinite sentinel.
    pub fn barriers_finite(&self) -> bool {
        self.band_magnitude().is_finite()
    }
}

// ───────────────────────────── envelope checks ────────────────────────────

/// Outcome of a growth-envelope check: sample counts and worst margins
/// (negative margin = comfortably inside the bound).
#[derive(Debug, Clone)]
pub struct EnvelopeReport {
    /// Number of `(node, y, z)` samples checked against the f-envelope.
    pub f_samples: usize,
    /// Number of `(node, y)` samples checked against the g-bound.
    pub g_samples: usize,
    /// Worst value of `|f| − (η + C/2·z²)` observed.
    pub worst_f_margin: f64,
    /// Worst value of `|g| − 1` observed.
    pub worst_g_margin: f64,
}

/// Checks the declared growth envelopes by sampling: at every step node, `y`
/// is drawn uniformly from the (clipped) band and `z` swept over a symmetric
/// grid plus random draws; asserts `|f(t,·,y,z)| ≤ η + (C/2)·z²` and
/// `|g(t,·,y)| ≤ 1`, within [`ENVELOPE_TOL`].
///
/// Errors with the offending sample on the first violation.
pub fn check_envelopes(spec: &ProblemSpec, samples_per_node: usize, seed: u64) -> Result<EnvelopeReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut report = EnvelopeReport {
        f_samples: 0,
        g_samples: 0,
        worst_f_margin: f64::NEG_INFINITY,
        worst_g_margin: f64::NEG_INFINITY,
    };
    let z_grid: Vec<f64> = (-6..=6).map(|i| i as f64).collect();
    for step in 0..spec.grid.steps() {
        for node in spec.grid.nodes_at(step) {
            let ctx = spec.ctx(node);
            let lo = spec.low.get(node).max(-BAND_CLIP);
            let hi = spec.up.get(node).min(BAND_CLIP);
            let eta = spec.eta.get(node);
            let c = spec.cap_c.get(node);
            for _ in 0..samples_per_node {
                let y = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                for &z in z_grid.iter() {
                    let z = z + rng.random_range(-0.5..0.5);
                    let bound = eta + 0.5 * c * z * z;
                    let observed = spec.driver_f.eval(&ctx, y, z).abs();
                    report.f_samples += 1;
                    report.worst_f_margin = report.worst_f_margin.max(observed - bound);
                    if observed > bound + ENVELOPE_TOL {
                        return Err(Error::EnvelopeViolated {
                            kind: "f",
                            step: node.step,
                            level: node.level,
                            y,
                            z,
                            observed,
                            bound,
                        });
                    }
                }
                let observed = spec.driver_g.eval(&ctx, y).abs();
                report.g_samples += 1;
                report.worst_g_margin = report.worst_g_margin.max(observed - 1.0);
                if observed > 1.0 + ENVELOPE_TOL {
                    return Err(Error::EnvelopeViolated {
                        kind: "g",
                        step: node.step,
                        level: node.level,
                        y,
                        z: f64::NAN,
                        observed,
                        bound: 1.0,
                    });
                }
            }
        }
    }
    Ok(report)
}

// ────────────────────────────── barrier shift ─────────────────────────────

/// A shifted instance together with the data needed to map solutions back.
#[derive(Debug, Clone)]
pub struct ShiftReduction {
    /// The shifted instance: barriers `L−S ≤ 0 ≤ U−S`, recentred drivers,
    /// forcing absorbing the finite-variation part of `S`.
    pub spec: ProblemSpec,
    /// The separator that was subtracted.
    pub s: AdaptedField,
    /// Martingale-representation coefficients of `S` per step node (the
    /// amount added back to `Z`).
    pub alpha: AdaptedField,
}

impl ShiftReduction {
    /// Maps a solution of the shifted instance back to original variables:
    /// `Y = Y' + S`, `Z = Z' + α`, reflection increments unchanged.
    pub fn restore(&self, sol: &LatticeSolution) -> LatticeSolution {
        let mut out = sol.clone();
        let n = self.s.last_step();
        for step in 0..=n {
            for level in 0..=step {
                let node = Node { step, level };
                let y = out.y.get(node) + self.s.get(node);
                out.y.set(node, y);
                if step < n {
                    let z = out.z.get(node) + self.alpha.get(node);
                    out.z.set(node, z);
                }
            }
        }
        out
    }
}

/// Recenters an instance on its separator: barriers become `L−S` and `U−S`
/// (which bracket zero), drivers are recentred so the shifted solution is
/// `Y − S`, and the forcing absorbs the finite-variation part of `S`.
///
/// The lattice decomposition of `S` is exact: per step node,
/// `ΔS(branch) = dv + α·ΔW(branch)` with `dv = E[S_next] − S` and `α` the
/// martingale-representation coefficient of `S_next`.
///
/// Errors when no separator is present and the band does not already bracket
/// zero — there is nothing to shift by.
pub fn shift_by_separator(spec: &ProblemSpec) -> Result<ShiftReduction> {
    let n = spec.grid.steps();
    let s = match &spec.separator {
        Some(s) => s.clone(),
        None => {
            return Err(Error::NoAdmissibleShift {
                reason: "instance declares no separator S between the barriers".to_string(),
            })
        }
    };
    let measure = spec.measure;
    let grid = spec.grid;
    let mut dv = AdaptedField::constant(n.saturating_sub(1), 0.0);
    let mut alpha = AdaptedField::constant(n.saturating_sub(1), 0.0);
    for step in 0..n {
        for node in grid.nodes_at(step) {
            let e = measure.expect_next(&s, node)?;
            dv.set(node, e - s.get(node));
            alpha.set(node, measure.martingale_rep(&s, node, &grid)?);
        }
    }

    let low = AdaptedField::from_fn(n, |node| spec.low.get(node) - s.get(node));
    let up = AdaptedField::from_fn(n, |node| spec.up.get(node) - s.get(node));
    let terminal: Vec<f64> = (0..=n)
        .map(|level| spec.terminal[level] - s.get(Node { step: n, level }))
        .collect();

    let dr_plus =
        AdaptedField::from_fn(n - 1, |node| spec.dr_plus.get(node) + dv.get(node).max(0.0));
    let dr_minus =
        AdaptedField::from_fn(n - 1, |node| spec.dr_minus.get(node) + (-dv.get(node)).max(0.0));

    // |f(y+S, z+α)| ≤ η + C/2·(z+α)² ≤ (η + C·α²) + C·z' ²  via (a+b)² ≤ 2a²+2b².
    let eta = AdaptedField::from_fn(n - 1, |node| {
        spec.eta.get(node) + spec.cap_c.get(node) * alpha.get(node) * alpha.get(node)
    });
    let cap_c = AdaptedField::from_fn(n, |node| 2.0 * spec.cap_c.get(node));

    let base_f = spec.driver_f.clone();
    let base_g = spec.driver_g.clone();
    let s_for_f = s.clone();
    let alpha_for_f = alpha.clone();
    let driver_f = DriverF::Custom {
        label: "shifted",
        f: Arc::new(move |ctx: &StepCtx, y: f64, z: f64| {
            base_f.eval(ctx, y + s_for_f.get(ctx.node), z + alpha_for_f.get(ctx.node))
        }),
    };
    let s_for_g = s.clone();
    let g_bound = spec.driver_g.magnitude_bound(spec.band_magnitude());
    let driver_g = DriverG::Custom {
        label: "shifted",
        g: Arc::new(move |ctx: &StepCtx, y: f64| base_g.eval(ctx, y + s_for_g.get(ctx.node))),
        bound: g_bound,
    };

    let shifted = ProblemSpec::assemble(
        grid,
        measure,
        driver_f,
        driver_g,
        low,
        up,
        None,
        terminal,
        spec.da.clone(),
        dr_plus,
        dr_minus,
        eta,
        cap_c,
    )?;
    // The shifted band must bracket zero: L−S ≤ 0 ≤ U−S follows from L ≤ S ≤ U,
    // which validate() has already enforced via the separator check on `spec`.
    Ok(ShiftReduction { spec: shifted, s, alpha })
}

// ─────────────────────────────── g-normalization ──────────────────────────

/// Replaces `(g, dA)` by `(g/(1+η̄), (1+η̄)·dA)` where `η̄` bounds `|g|` on the
/// band, so the new clock driver satisfies `|g| ≤ 1` while the product `g·dA`
/// is unchanged nodewise.
///
/// Errors when the catalog cannot produce a magnitude bound for `g`.
pub fn normalize_g(spec: &ProblemSpec) -> Result<ProblemSpec> {
    let band = spec.band_magnitude();
    let eta_bar = spec.driver_g.magnitude_bound(band).ok_or_else(|| Error::NoGBound {
        reason: format!(
            "driver {:?} declares no magnitude bound (band magnitude {band})",
            spec.driver_g
        ),
    })?;
    let scale = 1.0 + eta_bar;
    let base = spec.driver_g.clone();
    let driver_g = DriverG::Custom {
        label: "normalized",
        g: Arc::new(move |ctx: &StepCtx, y: f64| base.eval(ctx, y) / scale),
        bound: Some(eta_bar / scale),
    };
    let da = AdaptedField::from_fn(spec.da.last_step(), |node| scale * spec.da.get(node));
    let mut out = spec.clone();
    out.driver_g = driver_g;
    out.da = da;
    out.validate()?;
    Ok(out)
}

// ──────────────────────────── configuration layer ─────────────────────────

/// Grid parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridConfig {
    /// Horizon `T > 0`.
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Number of steps `N ≥ 1`.
    #[serde(rename = "N")]
    pub steps: usize,
}

/// Driver `f` catalog entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum DriverFConfig {
    /// `f ≡ 0`.
    Zero,
    /// `f ≡ value`.
    Constant { value: f64 },
    /// `f = a·y + b·z`.
    Linear { a: f64, b: f64 },
    /// `f = −(c/2)·|z|²`.
    QuadraticZ { c: Coef },
    /// Formula over `t, B, y, z`; requires explicit envelopes.
    Custom { formula: Expr },
}

/// Driver `g` catalog entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum DriverGConfig {
    /// `g ≡ 0`.
    Zero,
    /// `g ≡ value`.
    Constant { value: f64 },
    /// `g = a·y + b`.
    Linear { a: f64, b: f64 },
    /// Formula over `t, B, y`.
    Custom { formula: Expr },
}

/// Barrier catalog entry; `none` is the infinite sentinel that disables the
/// corresponding reflection.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum BarrierConfig {
    /// Disable this barrier (sentinel `±∞`).
    None,
    /// Constant barrier.
    Constant { value: f64 },
    /// `intercept + slope·B`.
    Affine { intercept: f64, slope: f64 },
    /// Formula over `t, B` (payoff-shaped barriers are written with `exp`/`max`).
    Custom { formula: Expr },
}

impl BarrierConfig {
    fn to_node_fn(&self, sentinel: f64) -> Result<NodeFn> {
        Ok(match self {
            BarrierConfig::None => NodeFn::Constant(sentinel),
            BarrierConfig::Constant { value } => NodeFn::Constant(*value),
            BarrierConfig::Affine { intercept, slope } => {
                NodeFn::AffineB { intercept: *intercept, slope: *slope }
            }
            BarrierConfig::Custom { formula } => NodeFn::formula(formula.clone())?,
        })
    }
}

/// Terminal-condition catalog entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum TerminalConfig {
    /// Constant value.
    Constant { value: f64 },
    /// `intercept + slope·B_T`.
    Affine { intercept: f64, slope: f64 },
    /// Formula over `t, B` (evaluated at `t = T`).
    Custom { formula: Expr },
}

impl TerminalConfig {
    pub(crate) fn to_node_fn(&self) -> Result<NodeFn> {
        Ok(match self {
            TerminalConfig::Constant { value } => NodeFn::Constant(*value),
            TerminalConfig::Affine { intercept, slope } => {
                NodeFn::AffineB { intercept: *intercept, slope: *slope }
            }
            TerminalConfig::Custom { formula } => NodeFn::formula(formula.clone())?,
        })
    }
}

/// Clock / forcing catalog entry: increments accrue at a (nonnegative for `A`)
/// rate per unit time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum ClockConfig {
    /// No accrual.
    Zero,
    /// `rate·Δt` per step; the rate may depend on `(t, B)`.
    Rate { value: Coef },
}

impl ClockConfig {
    fn realize(&self, grid: &TimeGrid) -> Result<AdaptedField> {
        let n = grid.steps();
        Ok(match self {
            ClockConfig::Zero => AdaptedField::constant(n - 1, 0.0),
            ClockConfig::Rate { value } => {
                value.validate_symbols("clock rate")?;
                AdaptedField::from_fn(n - 1, |node| {
                    let ctx = StepCtx {
                        node,
                        t: grid.time(node.step),
                        b: node.brownian(grid),
                    };
                    value.eval(&ctx) * grid.dt()
                })
            }
        })
    }
}

/// Barrier block of the configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BarriersConfig {
    #[serde(rename = "L")]
    pub low: BarrierConfig,
    #[serde(rename = "U")]
    pub up: BarrierConfig,
    /// Optional separating semimartingale.
    #[serde(rename = "S", default, skip_serializing_if = "Option::is_none")]
    pub separator: Option<TerminalConfig>,
}

/// Clock block of the configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClockBlockConfig {
    #[serde(rename = "A")]
    pub a: ClockConfig,
    #[serde(rename = "R")]
    pub r: ClockConfig,
}

/// Explicit growth envelopes (mandatory for custom drivers).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvelopesConfig {
    pub eta: Coef,
    #[serde(rename = "C")]
    pub c: Coef,
}

/// Serde mirror of the JSON problem schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub grid: GridConfig,
    /// Up-branch probability; defaults to the symmetric measure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    pub driver_f: DriverFConfig,
    pub driver_g: DriverGConfig,
    pub barriers: BarriersConfig,
    pub terminal: TerminalConfig,
    pub clock: ClockBlockConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelopes: Option<EnvelopesConfig>,
}

impl ProblemConfig {
    /// Parses a configuration from JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Builds the instance on the configured grid.
    pub fn build(&self) -> Result<ProblemSpec> {
        self.build_with_steps(self.grid.steps)
    }

    /// Builds the instance on a re-gridded horizon with `steps` steps — the
    /// refinement ladder rebuilds the same configuration at several `N`.
    pub fn build_with_steps(&self, steps: usize) -> Result<ProblemSpec> {
        let grid = TimeGrid::new(self.grid.horizon, steps)?;
        let n = grid.steps();
        let measure = match self.q {
            Some(q) => BranchMeasure::new(q)?,
            None => BranchMeasure::symmetric(),
        };

        let driver_f = match &self.driver_f {
            DriverFConfig::Zero => DriverF::Zero,
            DriverFConfig::Constant { value } => DriverF::Constant(*value),
            DriverFConfig::Linear { a, b } => DriverF::Linear { a: *a, b: *b },
            DriverFConfig::QuadraticZ { c } => {
                c.validate_symbols("quadratic coefficient c")?;
                DriverF::QuadraticZ { c: c.clone() }
            }
            DriverFConfig::Custom { formula } => DriverF::formula(formula.clone())?,
        };
        let driver_g = match &self.driver_g {
            DriverGConfig::Zero => DriverG::Zero,
            DriverGConfig::Constant { value } => DriverG::Constant(*value),
            DriverGConfig::Linear { a, b } => DriverG::Linear { a: *a, b: *b },
            DriverGConfig::Custom { formula } => DriverG::formula(formula.clone())?,
        };

        let low = self.barriers.low.to_node_fn(f64::NEG_INFINITY)?.realize(&grid, n);
        let up = self.barriers.up.to_node_fn(f64::INFINITY)?.realize(&grid, n);
        let separator = match &self.barriers.separator {
            Some(cfg) => Some(cfg.to_node_fn()?.realize(&grid, n)),
            None => None,
        };
        let terminal_fn = self.terminal.to_node_fn()?;
        let terminal: Vec<f64> = (0..=n)
            .map(|level| {
                let node = Node { step: n, level };
                terminal_fn.eval(grid.horizon(), node.brownian(&grid))
            })
            .collect();

        let da = self.clock.a.realize(&grid)?;
        let (dr_plus, dr_minus) = match &self.clock.r {
            ClockConfig::Zero => {
                (AdaptedField::constant(n - 1, 0.0), AdaptedField::constant(n - 1, 0.0))
            }
            ClockConfig::Rate { value } => {
                value.validate_symbols("forcing rate")?;
                let signed = AdaptedField::from_fn(n - 1, |node| {
                    let ctx = StepCtx {
                        node,
                        t: grid.time(node.step),
                        b: node.brownian(&grid),
                    };
                    value.eval(&ctx) * grid.dt()
                });
                let plus = AdaptedField::from_fn(n - 1, |node| signed.get(node).max(0.0));
                let minus = AdaptedField::from_fn(n - 1, |node| (-signed.get(node)).max(0.0));
                (plus, minus)
            }
        };

        let (eta, cap_c) = self.realize_envelopes(&grid, &low, &up)?;

        ProblemSpec::assemble(
            grid, measure, driver_f, driver_g, low, up, separator, terminal, da, dr_plus,
            dr_minus, eta, cap_c,
        )
    }

    /// Envelopes: explicit configuration wins; otherwise the driver catalog
    /// declares them. Custom drivers without explicit envelopes are rejected.
    fn realize_envelopes(
        &self,
        grid: &TimeGrid,
        low: &AdaptedField,
        up: &AdaptedField,
    ) -> Result<(AdaptedField, AdaptedField)> {
        let n = grid.steps();
        let eval_coef = |coef: &Coef, last: usize| -> AdaptedField {
            AdaptedField::from_fn(last, |node| {
                let ctx = StepCtx { node, t: grid.time(node.step), b: node.brownian(grid) };
                coef.eval(&ctx)
            })
        };
        if let Some(env) = &self.envelopes {
            env.eta.validate_symbols("envelope eta")?;
            env.c.validate_symbols("envelope C")?;
            return Ok((eval_coef(&env.eta, n - 1), eval_coef(&env.c, n)));
        }
        match &self.driver_f {
            DriverFConfig::Zero => {
                Ok((AdaptedField::constant(n - 1, 0.0), AdaptedField::constant(n, 0.0)))
            }
            DriverFConfig::Constant { value } => {
                Ok((AdaptedField::constant(n - 1, value.abs()), AdaptedField::constant(n, 0.0)))
            }
            DriverFConfig::Linear { a, b } => {
                // |a·y + b·z| ≤ |a|·max(|L|,|U|) + b²/2 + (1/2)·z²  (Young).
                if *a != 0.0 {
                    let finite = low.max_abs().is_finite() && up.max_abs().is_finite();
                    if !finite {
                        return Err(Error::config(
                            "linear driver with a ≠ 0 needs finite barriers or explicit envelopes"
                                .to_string(),
                        ));
                    }
                }
                let eta = AdaptedField::from_fn(n - 1, |node| {
                    let band = low.get(node).abs().max(up.get(node).abs());
                    let ay = if *a == 0.0 { 0.0 } else { a.abs() * band };
                    ay + 0.5 * b * b
                });
                let c = if *b == 0.0 { 0.0 } else { 1.0 };
                Ok((eta, AdaptedField::constant(n, c)))
            }
            DriverFConfig::QuadraticZ { c } => {
                Ok((AdaptedField::constant(n - 1, 0.0), eval_coef(c, n)))
            }
            DriverFConfig::Custom { .. } => Err(Error::config(
                "custom driver f requires explicit envelopes {eta, C}".to_string(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn basic_config_json() -> &'static str {
        r#"{
            "grid": {"T": 1.0, "N": 4},
            "driver_f": {"kind": "quadratic_z", "params": {"c": 1.0}},
            "driver_g": {"kind": "constant", "params": {"value": -0.5}},
            "barriers": {
                "L": {"kind": "constant", "params": {"value": -1.0}},
                "U": {"kind": "constant", "params": {"value": 1.0}}
            },
            "terminal": {"kind": "custom", "params": {"formula": "min(1, max(-1, 0.5*B))"}},
            "clock": {
                "A": {"kind": "rate", "params": {"value": 1.0}},
                "R": {"kind": "zero"}
            }
        }"#
    }

    #[test]
    fn config_roundtrip_builds_valid_spec() {
        let config = ProblemConfig::from_json(basic_config_json()).unwrap();
        let spec = config.build().unwrap();
        assert_eq!(spec.grid.steps(), 4);
        assert_relative_eq!(spec.da.get(Node::root()), 0.25);
        // Catalog envelopes for quadratic_z: eta = 0, C = c.
        assert_abs_diff_eq!(spec.eta.get(Node::root()), 0.0);
        assert_relative_eq!(spec.cap_c.get(Node::root()), 1.0);
        spec.validate().unwrap();
    }

    #[test]
    fn rebuild_at_other_steps_reuses_functional_data() {
        let config = ProblemConfig::from_json(basic_config_json()).unwrap();
        let spec = config.build_with_steps(8).unwrap();
        assert_eq!(spec.grid.steps(), 8);
        assert_relative_eq!(spec.da.get(Node::root()), 0.125);
    }

    #[test]
    fn terminal_outside_band_is_rejected() {
        let mut config = ProblemConfig::from_json(basic_config_json()).unwrap();
        config.terminal = TerminalConfig::Constant { value: 2.0 };
        let err = config.build().unwrap_err();
        assert!(matches!(err, Error::InvalidProblem { .. }), "{err}");
    }

    #[test]
    fn crossed_barriers_are_rejected() {
        let mut config = ProblemConfig::from_json(basic_config_json()).unwrap();
        config.barriers.low = BarrierConfig::Constant { value: 2.0 };
        assert!(config.build().is_err());
    }

    #[test]
    fn negative_clock_rate_is_rejected() {
        let mut config = ProblemConfig::from_json(basic_config_json()).unwrap();
        config.clock.a = ClockConfig::Rate { value: Coef::Const(-1.0) };
        let err = config.build().unwrap_err();
        assert!(err.to_string().contains("dA"), "{err}");
    }

    #[test]
    fn sentinel_barriers_disable_reflection_bounds() {
        let mut config = ProblemConfig::from_json(basic_config_json()).unwrap();
        config.barriers.low = BarrierConfig::None;
        config.barriers.up = BarrierConfig::None;
        let spec = config.build().unwrap();
        assert!(spec.low.get(Node::root()).is_infinite());
        assert!(!spec.barriers_finite());
    }

    #[test]
    fn custom_driver_without_envelopes_is_rejected() {
        let mut config = ProblemConfig::from_json(basic_config_json()).unwrap();
        config.driver_f =
            DriverFConfig::Custom { formula: Expr::parse("y - z^2").unwrap() };
        let err = config.build().unwrap_err();
        assert!(err.to_string().contains("envelopes"), "{err}");
        config.envelopes =
            Some(EnvelopesConfig { eta: Coef::Const(1.5), c: Coef::Const(2.0) });
        config.build().unwrap();
    }

    #[test]
    fn envelope_check_passes_quadratic_at_equality() {
        // |f| = (c/2)z² meets the bound with equality; the slack must absorb it.
        let config = ProblemConfig::from_json(basic_config_json()).unwrap();
        let spec = config.build().unwrap();
        let report = check_envelopes(&spec, 4, 7).unwrap();
        assert!(report.worst_f_margin <= ENVELOPE_TOL);
        assert!(report.worst_g_margin <= -0.49, "|g| = 0.5 gives margin -0.5");
    }

    #[test]
    fn envelope_check_catches_undeclared_growth() {
        let mut config = ProblemConfig::from_json(basic_config_json()).unwrap();
        config.driver_f = DriverFConfig::Custom { formula: Expr::parse("2*z").unwrap() };
        config.envelopes = Some(EnvelopesConfig { eta: Coef::Const(0.0), c: Coef::Const(0.1) });
        let spec = config.build().unwrap();
        let err = check_envelopes(&spec, 4, 7).unwrap_err();
        assert!(matches!(err, Error::EnvelopeViolated { kind: "f", .. }), "{err}");
    }

    #[test]
    fn g_normalization_preserves_product_and_bounds_driver() {
        // g ≡ -3 with η̄ = 3 becomes g ≡ -3/4 while dA is scaled by 4.
        let mut config = ProblemConfig::from_json(basic_config_json()).unwrap();
        config.driver_g = DriverGConfig::Constant { value: -3.0 };
        let spec = config.build().unwrap();
        let normalized = normalize_g(&spec).unwrap();
        let node = Node::root();
        let ctx = normalized.ctx(node);
        assert_relative_eq!(normalized.driver_g.eval(&ctx, 0.3), -0.75, epsilon = 1e-15);
        assert_relative_eq!(normalized.da.get(node), 4.0 * spec.da.get(node), epsilon = 1e-15);
        let before = spec.driver_g.eval(&ctx, 0.3) * spec.da.get(node);
        let after = normalized.driver_g.eval(&ctx, 0.3) * normalized.da.get(node);
        assert_relative_eq!(before, after, max_relative = 1e-15);
    }

    #[test]
    fn g_normalization_without_bound_is_an_error() {
        let mut config = ProblemConfig::from_json(basic_config_json()).unwrap();
        config.driver_g = DriverGConfig::Custom { formula: Expr::parse("y*t").unwrap() };
        let spec = config.build().unwrap();
        let err = normalize_g(&spec).unwrap_err();
        assert!(matches!(err, Error::NoGBound { .. }), "{err}");
    }

    #[test]
    fn shift_requires_separator() {
        let config = ProblemConfig::from_json(basic_config_json()).unwrap();
        let spec = config.build().unwrap();
        let err = shift_by_separator(&spec).unwrap_err();
        assert!(matches!(err, Error::NoAdmissibleShift { .. }), "{err}");
    }

    #[test]
    fn shift_recentres_band_on_zero() {
        let mut config = ProblemConfig::from_json(basic_config_json()).unwrap();
        // Band [1, 3] with separator S = 2 + 0.1·B between the barriers.
        config.barriers.low = BarrierConfig::Constant { value: 1.0 };
        config.barriers.up = BarrierConfig::Constant { value: 3.0 };
        config.barriers.separator =
            Some(TerminalConfig::Affine { intercept: 2.0, slope: 0.1 });
        config.terminal = TerminalConfig::Constant { value: 2.0 };
        config.driver_f = DriverFConfig::Linear { a: 0.2, b: 0.1 };
        let spec = config.build().unwrap();
        let shifted = shift_by_separator(&spec).unwrap();
        let n = spec.grid.steps();
        for step in 0..=n {
            for node in spec.grid.nodes_at(step) {
                assert!(shifted.spec.low.get(node) <= 0.0 && shifted.spec.up.get(node) >= 0.0);
            }
        }
        // S = 2 + 0.1 B is a martingale: no forcing absorbed, α ≡ 0.1.
        for step in 0..n {
            for node in spec.grid.nodes_at(step) {
                assert_abs_diff_eq!(shifted.alpha.get(node), 0.1, epsilon = 1e-14);
                assert_abs_diff_eq!(
                    shifted.spec.dr_plus.get(node) - spec.dr_plus.get(node),
                    0.0,
                    epsilon = 1e-14
                );
            }
        }
    }
}
