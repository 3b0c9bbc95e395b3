//! Dynkin stopping games and game (cancellable) options on the lattice.
//!
//! # Dynkin games
//!
//! Two players watch the same payoff data: the maximizer stops at `σ` and
//! receives `L_σ`, the minimizer stops at `λ` and pays `U_λ ≥ L_λ`, ties
//! before expiry pay `Q ∈ [L, U]`, and expiry pays `ξ ∈ [L_T, U_T]`. A
//! nondecreasing utility `F` is applied to whatever is paid. The value
//! process is the zero-generator doubly reflected recursion on the
//! transformed data,
//!
//! ```text
//! V_N = F(ξ),    V_k = min( F(U_k), max( F(L_k), E[V_{k+1}] ) ) ,
//! ```
//!
//! which is exactly the reflecting solver's clamp step, so the two agree
//! bitwise. The rules `λ* = first V = F(U)` and `σ* = first V = F(L)` form a
//! saddle point: stopped appropriately, `V` is a supermartingale against any
//! `σ` and a submartingale against any `λ`, and both properties are exact in
//! the discrete setting — [`saddle_check`] confirms them by enumerating every
//! adapted rule on the history tree.
//!
//! # Game options
//!
//! A game option gives the holder the right to exercise for `L(t, S)` and
//! the issuer the right to cancel for `U(t, S) ≥ L(t, S)`. Under the
//! risk-neutral branch weight `q* = (e^{rΔt} − d)/(u − d)` the discounted
//! value solves the same zero-generator reflected recursion with discounted
//! payoffs. The hedge ratio `γ = (V↑ − V↓)/(S↑ − S↓)` makes the discounted
//! self-financing portfolio match the value's martingale part identically on
//! both branches, and the lower reflection increments only add surplus while
//! the upper ones cannot occur strictly before the cancellation rule — so
//! the portfolio super-replicates every exercise strategy pathwise.

use std::fmt;
use std::sync::Arc;

use crate::error::Error;
use crate::expr::{Bindings, Expr, Symbol};
use crate::lattice::{
    path_node, AdaptedField, BranchMeasure, Node, StoppingRule, TimeGrid,
};
use crate::problem::{DriverF, DriverG, ProblemSpec};
use crate::solver::{solve, LatticeSolution, SolverConfig};
use crate::Result;

/// Absolute tolerance for detecting `V = F(U)` / `V = F(L)` hits.
pub const HIT_TOL: f64 = 1e-12;
/// Tolerance for the enumerated saddle inequalities.
pub const SADDLE_TOL: f64 = 1e-12;
/// Largest step count for which path enumeration (payoffs, hedges) runs.
pub const MAX_ENUMERATION_STEPS: usize = 16;
/// Tolerance for the pathwise hedge audit: worst shortfall of the
/// super-replicating portfolio and worst mismatch between the stock increment
/// and the martingale increment it replicates.
pub const HEDGE_TOL: f64 = 1e-10;

// ─────────────────────────────── utilities ────────────────────────────────

/// Nondecreasing utility applied to every payoff of a game.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Utility {
    /// `F(x) = x`.
    Identity,
    /// `F(x) = scale·x + offset` with `scale > 0`.
    Affine { scale: f64, offset: f64 },
    /// `F(x) = ((x − shift)⁺)^exponent` with `exponent > 0`.
    Power { shift: f64, exponent: f64 },
    /// `F(x) = e^{θx}` with `θ > 0`.
    Exponential { theta: f64 },
}

impl Utility {
    /// Rejects parameterizations that are not nondecreasing.
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Utility::Identity => true,
            Utility::Affine { scale, offset } => *scale > 0.0 && offset.is_finite(),
            Utility::Power { shift, exponent } => *exponent > 0.0 && shift.is_finite(),
            Utility::Exponential { theta } => *theta > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("utility {self:?} is not nondecreasing")))
        }
    }

    /// Applies the utility.
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Utility::Identity => x,
            Utility::Affine { scale, offset } => scale * x + offset,
            Utility::Power { shift, exponent } => (x - shift).max(0.0).powf(*exponent),
            Utility::Exponential { theta } => (theta * x).exp(),
        }
    }
}

// ────────────────────────────── Dynkin games ──────────────────────────────

/// Payoff data of a Dynkin game on the lattice.
#[derive(Debug, Clone)]
pub struct DynkinGameSpec {
    pub grid: TimeGrid,
    pub measure: BranchMeasure,
    /// Paid when the maximizer stops strictly first.
    pub low: AdaptedField,
    /// Paid when the minimizer stops strictly first; `U ≥ L`.
    pub up: AdaptedField,
    /// Paid on simultaneous stops before expiry; `L ≤ Q ≤ U`.
    pub tie: AdaptedField,
    /// Paid at expiry when nobody stopped; `L_N ≤ ξ ≤ U_N`.
    pub terminal: Vec<f64>,
    pub utility: Utility,
}

impl DynkinGameSpec {
    /// Checks field shapes, payoff ordering, and the utility.
    pub fn validate(&self) -> Result<()> {
        let n = self.grid.steps();
        self.utility.validate()?;
        for (name, field) in [("L", &self.low), ("U", &self.up), ("Q", &self.tie)] {
            if field.last_step() != n {
                return Err(Error::invalid(format!(
                    "game payoff {name} covers steps 0..={}, expected 0..={n}",
                    field.last_step()
                )));
            }
        }
        if self.terminal.len() != n + 1 {
            return Err(Error::invalid(format!(
                "terminal payoff has {} levels, expected {}",
                self.terminal.len(),
                n + 1
            )));
        }
        for step in 0..=n {
            for node in self.grid.nodes_at(step) {
                let (l, u, q) = (self.low.get(node), self.up.get(node), self.tie.get(node));
                if !(l.is_finite() && u.is_finite() && q.is_finite()) {
                    return Err(Error::invalid(format!("non-finite game payoff at {node:?}")));
                }
                if l > u || q < l || q > u {
                    return Err(Error::invalid(format!(
                        "game payoffs must satisfy L ≤ Q ≤ U; at {node:?}: L={l}, Q={q}, U={u}"
                    )));
                }
            }
        }
        for (level, &xi) in self.terminal.iter().enumerate() {
            let node = Node { step: n, level };
            if xi < self.low.get(node) || xi > self.up.get(node) {
                return Err(Error::invalid(format!(
                    "expiry payoff {xi} outside [L, U] at terminal level {level}"
                )));
            }
        }
        Ok(())
    }
}

/// Value process and optimal stopping flags of a Dynkin game.
#[derive(Debug, Clone)]
pub struct DynkinSolution {
    /// Value in utility space on every node.
    pub value: AdaptedField,
    /// `1.0` where the minimizer's rule stops (`V = F(U)`), steps `0..N`.
    pub stop_up: AdaptedField,
    /// `1.0` where the maximizer's rule stops (`V = F(L)`), steps `0..N`.
    pub stop_low: AdaptedField,
}

impl DynkinSolution {
    /// Game value at the root.
    pub fn root_value(&self) -> f64 {
        self.value.get(Node::root())
    }

    fn steps(&self) -> usize {
        self.value.last_step()
    }

    fn hit_step(flags: &AdaptedField, path: u64, steps: usize) -> usize {
        for step in 0..steps {
            if flags.get(path_node(path, step)) >= 0.5 {
                return step;
            }
        }
        steps
    }

    /// First step along `path` where the minimizer's optimal rule stops.
    pub fn lambda_step(&self, path: u64) -> usize {
        Self::hit_step(&self.stop_up, path, self.steps())
    }

    /// First step along `path` where the maximizer's optimal rule stops.
    pub fn sigma_step(&self, path: u64) -> usize {
        Self::hit_step(&self.stop_low, path, self.steps())
    }

    fn rule_from(&self, flags: &AdaptedField) -> Result<StoppingRule> {
        let n = self.steps();
        if n > MAX_ENUMERATION_STEPS {
            return Err(Error::invalid(format!(
                "stopping rules on the history tree need 2^{n}−1 flags; \
                 limit is {MAX_ENUMERATION_STEPS} steps"
            )));
        }
        Ok(StoppingRule::from_node_predicate(n, n, |node| flags.get(node) >= 0.5))
    }

    /// The minimizer's optimal rule as an explicit history-tree rule.
    pub fn lambda_rule(&self) -> Result<StoppingRule> {
        self.rule_from(&self.stop_up)
    }

    /// The maximizer's optimal rule as an explicit history-tree rule.
    pub fn sigma_rule(&self) -> Result<StoppingRule> {
        self.rule_from(&self.stop_low)
    }
}

/// Solves the game by the clamp recursion in utility space.
pub fn dynkin_value(spec: &DynkinGameSpec) -> Result<DynkinSolution> {
    spec.validate()?;
    let n = spec.grid.steps();
    let f = &spec.utility;
    let mut value = AdaptedField::constant(n, 0.0);
    let mut stop_up = AdaptedField::constant(n - 1, 0.0);
    let mut stop_low = AdaptedField::constant(n - 1, 0.0);
    for (level, &xi) in spec.terminal.iter().enumerate() {
        value.set(Node { step: n, level }, f.apply(xi));
    }
    for step in (0..n).rev() {
        for node in spec.grid.nodes_at(step) {
            let e = spec.measure.expect_next(&value, node)?;
            let fl = f.apply(spec.low.get(node));
            let fu = f.apply(spec.up.get(node));
            let v = e.max(fl).min(fu);
            value.set(node, v);
            if (v - fu).abs() <= HIT_TOL {
                stop_up.set(node, 1.0);
            }
            if (v - fl).abs() <= HIT_TOL {
                stop_low.set(node, 1.0);
            }
        }
    }
    Ok(DynkinSolution { value, stop_up, stop_low })
}

/// Expected utility payoff `E[F(J(λ, σ))]` of a rule pair, by enumerating
/// every path: `J` pays `U_λ` when `λ < σ`, `L_σ` when `σ < λ`, `Q` on ties
/// before expiry and `ξ` at expiry.
pub fn evaluate_payoff(
    spec: &DynkinGameSpec,
    lambda: &StoppingRule,
    sigma: &StoppingRule,
) -> Result<f64> {
    let n = spec.grid.steps();
    if n > MAX_ENUMERATION_STEPS {
        return Err(Error::invalid(format!(
            "payoff evaluation enumerates 2^{n} paths; limit is {MAX_ENUMERATION_STEPS} steps"
        )));
    }
    let f = &spec.utility;
    let mut total = 0.0;
    for path in 0..(1u64 << n) {
        let lam = lambda.hit(path);
        let sig = sigma.hit(path);
        let stop = lam.min(sig);
        let paid = if lam < sig {
            spec.up.get(path_node(path, lam))
        } else if sig < lam {
            spec.low.get(path_node(path, sig))
        } else if stop < n {
            spec.tie.get(path_node(path, stop))
        } else {
            spec.terminal[crate::lattice::path_level(path, n)]
        };
        total += spec.measure.path_probability(path, n) * f.apply(paid);
    }
    Ok(total)
}

/// Result of enumerating every rule pair against the optimal rules.
#[derive(Debug, Clone, Copy)]
pub struct SaddleReport {
    /// Game value at the root.
    pub root_value: f64,
    /// Rules enumerated on each side.
    pub rules_per_side: usize,
    /// Worst of `E[F(J(λ*, σ))] − V₀` over all `σ` (should be ≤ 0).
    pub max_sigma_violation: f64,
    /// Worst of `V₀ − E[F(J(λ, σ*))]` over all `λ` (should be ≤ 0).
    pub max_lambda_violation: f64,
    /// `|E[F(J(λ*, σ*))] − V₀|`.
    pub equality_gap: f64,
}

impl SaddleReport {
    /// True when both saddle inequalities and the equality hold within
    /// [`SADDLE_TOL`].
    pub fn within_tolerance(&self) -> bool {
        self.max_sigma_violation <= SADDLE_TOL
            && self.max_lambda_violation <= SADDLE_TOL
            && self.equality_gap <= SADDLE_TOL
    }
}

/// Verifies the saddle property exhaustively: every adapted rule with
/// decisions on the first `decision_steps` steps is played against the
/// optimal rule of the other player.
pub fn saddle_check(spec: &DynkinGameSpec, decision_steps: usize) -> Result<SaddleReport> {
    let sol = dynkin_value(spec)?;
    let lam_star = sol.lambda_rule()?;
    let sig_star = sol.sigma_rule()?;
    let rules = crate::lattice::enumerate_stopping_rules(&spec.grid, decision_steps)?;
    let v0 = sol.root_value();
    let mut report = SaddleReport {
        root_value: v0,
        rules_per_side: rules.len(),
        max_sigma_violation: f64::NEG_INFINITY,
        max_lambda_violation: f64::NEG_INFINITY,
        equality_gap: (evaluate_payoff(spec, &lam_star, &sig_star)? - v0).abs(),
    };
    for rule in &rules {
        let against_sigma = evaluate_payoff(spec, &lam_star, rule)?;
        report.max_sigma_violation = report.max_sigma_violation.max(against_sigma - v0);
        let against_lambda = evaluate_payoff(spec, rule, &sig_star)?;
        report.max_lambda_violation = report.max_lambda_violation.max(v0 - against_lambda);
    }
    Ok(report)
}

// ─────────────────────────────── market model ─────────────────────────────

/// Per-step price factors of the binomial market.
#[derive(Debug, Clone, Copy)]
pub enum LatticeFactors {
    /// `u = e^{σ√Δt}`, `d = 1/u`.
    Crr { sigma: f64 },
    /// Explicit factors `0 < d < u`.
    Explicit { up: f64, down: f64 },
}

/// One-asset binomial market `S(k, j) = S₀·u^j·d^{k−j}` with rate `r`.
#[derive(Debug, Clone, Copy)]
pub struct MarketModel {
    pub spot: f64,
    pub rate: f64,
    /// Physical-measure drift. Pricing never reads it: the change to the
    /// risk-neutral branch weight absorbs any drift, exactly as the
    /// continuous theory absorbs `b` into the driftless dynamics.
    pub drift: f64,
    pub factors: LatticeFactors,
    pub grid: TimeGrid,
}

impl MarketModel {
    /// Validates the spot and the factors; the physical drift starts at 0
    /// and may be set freely (it never enters prices).
    pub fn new(spot: f64, rate: f64, factors: LatticeFactors, grid: TimeGrid) -> Result<Self> {
        if !(spot > 0.0 && spot.is_finite()) {
            return Err(Error::invalid(format!("spot must be positive, got {spot}")));
        }
        if !rate.is_finite() {
            return Err(Error::invalid(format!("rate must be finite, got {rate}")));
        }
        match factors {
            LatticeFactors::Crr { sigma } => {
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::invalid(format!(
                        "CRR volatility must be positive, got {sigma}"
                    )));
                }
            }
            LatticeFactors::Explicit { up, down } => {
                if !(0.0 < down && down < up && up.is_finite()) {
                    return Err(Error::invalid(format!(
                        "explicit factors need 0 < d < u, got d={down}, u={up}"
                    )));
                }
            }
        }
        Ok(MarketModel { spot, rate, drift: 0.0, factors, grid })
    }

    /// The per-step `(u, d)` pair.
    pub fn step_factors(&self) -> (f64, f64) {
        match self.factors {
            LatticeFactors::Crr { sigma } => {
                let x = (sigma * self.grid.sqrt_dt()).exp();
                (x, 1.0 / x)
            }
            LatticeFactors::Explicit { up, down } => (up, down),
        }
    }

    /// Risk-neutral branch weight; errors when the riskless growth is not
    /// strictly between the factors.
    pub fn risk_neutral(&self) -> Result<BranchMeasure> {
        let (u, d) = self.step_factors();
        let growth = (self.rate * self.grid.dt()).exp();
        if !(d < growth && growth < u) {
            return Err(Error::Arbitrage { d, growth, u });
        }
        BranchMeasure::new((growth - d) / (u - d))
    }

    /// Price at a node.
    pub fn price(&self, node: Node) -> f64 {
        let (u, d) = self.step_factors();
        self.spot * u.powi(node.level as i32) * d.powi((node.step - node.level) as i32)
    }

    /// Prices on every node of the grid.
    pub fn price_field(&self) -> AdaptedField {
        AdaptedField::from_fn(self.grid.steps(), |node| self.price(node))
    }
}

// ─────────────────────────────── game options ─────────────────────────────

/// A payoff as a function of time and price.
#[derive(Clone)]
pub enum Payoff {
    /// Formula over `t` and `S`.
    Formula(Expr),
    /// Programmatic payoff.
    Custom { label: &'static str, f: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync> },
}

impl Payoff {
    /// Builds a formula payoff, rejecting symbols other than `t, S`.
    pub fn formula(expr: Expr) -> Result<Self> {
        expr.require_only(&[Symbol::T, Symbol::S], "option payoff")?;
        Ok(Payoff::Formula(expr))
    }

    /// Evaluates at `(t, S)`.
    pub fn eval(&self, t: f64, s: f64) -> f64 {
        match self {
            Payoff::Formula(e) => e
                .eval(&Bindings::node(t, 0.0).with_s(s))
                .expect("payoff symbols validated at construction"),
            Payoff::Custom { f, .. } => f(t, s),
        }
    }
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payoff::Formula(e) => write!(f, "Payoff::Formula({e})"),
            Payoff::Custom { label, .. } => write!(f, "Payoff::Custom({label})"),
        }
    }
}

/// A cancellable claim: the holder may exercise for `holder(t, S)`, the
/// issuer may cancel for `cancel(t, S) ≥ holder(t, S)`, expiry pays
/// `terminal(T, S_T)`.
#[derive(Debug, Clone)]
pub struct GameOption {
    pub market: MarketModel,
    pub holder: Payoff,
    pub cancel: Payoff,
    pub terminal: Payoff,
}

impl GameOption {
    /// Checks payoff ordering at every realized node.
    pub fn validate(&self) -> Result<()> {
        let grid = self.market.grid;
        let n = grid.steps();
        for step in 0..=n {
            let t = grid.time(step);
            for node in grid.nodes_at(step) {
                let s = self.market.price(node);
                let l = self.holder.eval(t, s);
                let u = self.cancel.eval(t, s);
                if !(l.is_finite() && u.is_finite()) {
                    return Err(Error::invalid(format!("non-finite payoff at {node:?}")));
                }
                if l > u {
                    return Err(Error::invalid(format!(
                        "cancellation value must dominate exercise value; at {node:?}: \
                         holder {l} > cancel {u}"
                    )));
                }
                if step == n {
                    let xi = self.terminal.eval(t, s);
                    if xi < l || xi > u {
                        return Err(Error::invalid(format!(
                            "expiry payoff {xi} outside [holder, cancel] = [{l}, {u}] at {node:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Priced game option: value, hedge ratios, and optimal stopping flags.
#[derive(Debug, Clone)]
pub struct GameOptionSolution {
    /// The discounted reflected instance that was solved.
    pub discounted_spec: ProblemSpec,
    /// Its solution (discounted values).
    pub discounted: LatticeSolution,
    /// Undiscounted option values on every node.
    pub values: AdaptedField,
    /// Asset prices on every node.
    pub prices: AdaptedField,
    /// Hedge ratio `γ = (V↑ − V↓)/(S↑ − S↓)` per step node.
    pub gamma: AdaptedField,
    /// Bond-account value `β = V − γ·S` of the locally replicating
    /// portfolio per step node.
    pub beta: AdaptedField,
    /// `1.0` where the issuer's optimal cancellation rule stops.
    pub stop_cancel: AdaptedField,
    /// `1.0` where the holder's optimal exercise rule stops.
    pub stop_exercise: AdaptedField,
    /// Risk-neutral branch weight.
    pub q_star: f64,
}

impl GameOptionSolution {
    /// Price at inception.
    pub fn initial_price(&self) -> f64 {
        self.values.get(Node::root())
    }

    /// First step along `path` where the issuer's rule cancels.
    pub fn cancel_step(&self, path: u64) -> usize {
        let n = self.values.last_step();
        for step in 0..n {
            if self.stop_cancel.get(path_node(path, step)) >= 0.5 {
                return step;
            }
        }
        n
    }
}

/// Prices a game option: solves the zero-generator doubly reflected
/// recursion on discounted payoffs under the risk-neutral weight.
pub fn price_game_option(option: &GameOption, config: &SolverConfig) -> Result<GameOptionSolution> {
    option.validate()?;
    let market = &option.market;
    let grid = market.grid;
    let n = grid.steps();
    let measure = market.risk_neutral()?;
    let prices = market.price_field();

    let disc = |step: usize| (-market.rate * grid.time(step)).exp();
    let low = AdaptedField::from_fn(n, |node| {
        disc(node.step) * option.holder.eval(grid.time(node.step), prices.get(node))
    });
    let up = AdaptedField::from_fn(n, |node| {
        disc(node.step) * option.cancel.eval(grid.time(node.step), prices.get(node))
    });
    let terminal: Vec<f64> = (0..=n)
        .map(|level| {
            let node = Node { step: n, level };
            disc(n) * option.terminal.eval(grid.horizon(), prices.get(node))
        })
        .collect();

    let spec = ProblemSpec::assemble(
        grid,
        measure,
        DriverF::Zero,
        DriverG::Zero,
        low,
        up,
        None,
        terminal,
        AdaptedField::constant(n - 1, 0.0),
        AdaptedField::constant(n - 1, 0.0),
        AdaptedField::constant(n - 1, 0.0),
        AdaptedField::constant(n - 1, 0.0),
        AdaptedField::constant(n, 0.0),
    )?;
    let sol = solve(&spec, config)?;

    let values = AdaptedField::from_fn(n, |node| sol.y.get(node) / disc(node.step));
    let gamma = AdaptedField::from_fn(n - 1, |node| {
        let dv = values.get(node.up()) - values.get(node.down());
        let ds = prices.get(node.up()) - prices.get(node.down());
        dv / ds
    });
    let beta = AdaptedField::from_fn(n - 1, |node| {
        values.get(node) - gamma.get(node) * prices.get(node)
    });
    let mut stop_cancel = AdaptedField::constant(n - 1, 0.0);
    let mut stop_exercise = AdaptedField::constant(n - 1, 0.0);
    for step in 0..n {
        for node in grid.nodes_at(step) {
            if (sol.y.get(node) - spec.up.get(node)).abs() <= HIT_TOL {
                stop_cancel.set(node, 1.0);
            }
            if (sol.y.get(node) - spec.low.get(node)).abs() <= HIT_TOL {
                stop_exercise.set(node, 1.0);
            }
        }
    }
    Ok(GameOptionSolution {
        discounted_spec: spec,
        discounted: sol,
        values,
        prices,
        gamma,
        beta,
        stop_cancel,
        stop_exercise,
        q_star: measure.q(),
    })
}

/// Pathwise audit of the issuer's hedge.
#[derive(Debug, Clone, Copy)]
pub struct HedgeReport {
    /// Paths walked (`2^N`).
    pub paths: usize,
    /// Worst shortfall of the discounted portfolio below what it must cover:
    /// the exercise value at every step up to cancellation, the cancellation
    /// value when cancelling, the expiry payoff at expiry.
    pub worst_shortfall: f64,
    /// Worst mismatch between the hedge gain `γ·ΔS̃` and the value's
    /// martingale increment `z̃·ΔW` over nodes and branches.
    pub hedge_match: f64,
}

/// Walks every path with the self-financing portfolio
/// `X̃_{k+1} = X̃_k + γ_k·ΔS̃` started at the option price and confirms it
/// super-replicates every exercise strategy up to the issuer's cancellation.
pub fn verify_hedge(option: &GameOption, sol: &GameOptionSolution) -> Result<HedgeReport> {
    let market = &option.market;
    let grid = market.grid;
    let n = grid.steps();
    if n > MAX_ENUMERATION_STEPS {
        return Err(Error::invalid(format!(
            "hedge verification enumerates 2^{n} paths; limit is {MAX_ENUMERATION_STEPS} steps"
        )));
    }
    let measure = market.risk_neutral()?;
    let disc = |step: usize| (-market.rate * grid.time(step)).exp();
    let s_tilde = AdaptedField::from_fn(n, |node| disc(node.step) * sol.prices.get(node));

    let mut hedge_match = 0.0_f64;
    for step in 0..n {
        for node in grid.nodes_at(step) {
            let z = sol.discounted.z.get(node);
            let g = sol.gamma.get(node);
            for (child, dw) in [
                (node.up(), measure.dw_up(&grid)),
                (node.down(), measure.dw_down(&grid)),
            ] {
                let gain = g * (s_tilde.get(child) - s_tilde.get(node));
                hedge_match = hedge_match.max((gain - z * dw).abs());
            }
        }
    }

    let mut worst_shortfall = 0.0_f64;
    let paths = 1usize << n;
    for path in 0..paths as u64 {
        let mut x = sol.discounted.root_value();
        for step in 0..=n {
            let node = path_node(path, step);
            if step == n {
                let xi = sol.discounted_spec.terminal[node.level];
                worst_shortfall = worst_shortfall.max(xi - x);
                break;
            }
            worst_shortfall =
                worst_shortfall.max(sol.discounted_spec.low.get(node) - x);
            if sol.stop_cancel.get(node) >= 0.5 {
                worst_shortfall =
                    worst_shortfall.max(sol.discounted_spec.up.get(node) - x);
                break;
            }
            let next = path_node(path, step + 1);
            x += sol.gamma.get(node) * (s_tilde.get(next) - s_tilde.get(node));
        }
    }
    Ok(HedgeReport { paths, worst_shortfall, hedge_match })
}

// ─────────────────────────── configuration layer ──────────────────────────

use serde::{Deserialize, Serialize};

use crate::problem::{GridConfig, TerminalConfig};

/// Utility catalog entry.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum UtilityConfig {
    Identity,
    Affine { scale: f64, offset: f64 },
    Power { shift: f64, exponent: f64 },
    Exponential { theta: f64 },
}

impl UtilityConfig {
    fn build(&self) -> Result<Utility> {
        let utility = match *self {
            UtilityConfig::Identity => Utility::Identity,
            UtilityConfig::Affine { scale, offset } => Utility::Affine { scale, offset },
            UtilityConfig::Power { shift, exponent } => Utility::Power { shift, exponent },
            UtilityConfig::Exponential { theta } => Utility::Exponential { theta },
        };
        utility.validate()?;
        Ok(utility)
    }
}

/// Serde mirror of the JSON Dynkin-game schema: payoffs are node functions
/// over `(t, B)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynkinConfig {
    pub grid: GridConfig,
    /// Up-branch probability; defaults to the symmetric measure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(rename = "L")]
    pub low: TerminalConfig,
    #[serde(rename = "U")]
    pub up: TerminalConfig,
    #[serde(rename = "Q")]
    pub tie: TerminalConfig,
    pub terminal: TerminalConfig,
    #[serde(default = "default_utility")]
    pub utility: UtilityConfig,
}

fn default_utility() -> UtilityConfig {
    UtilityConfig::Identity
}

impl DynkinConfig {
    /// Parses a configuration from JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Realizes the payoff fields on the configured grid.
    pub fn build(&self) -> Result<DynkinGameSpec> {
        let grid = TimeGrid::new(self.grid.horizon, self.grid.steps)?;
        let n = grid.steps();
        let measure = match self.q {
            Some(q) => BranchMeasure::new(q)?,
            None => BranchMeasure::symmetric(),
        };
        let low = self.low.to_node_fn()?.realize(&grid, n);
        let up = self.up.to_node_fn()?.realize(&grid, n);
        let tie = self.tie.to_node_fn()?.realize(&grid, n);
        let terminal_fn = self.terminal.to_node_fn()?;
        let terminal = (0..=n)
            .map(|level| {
                terminal_fn.eval(grid.horizon(), Node { step: n, level }.brownian(&grid))
            })
            .collect();
        let spec = DynkinGameSpec {
            grid,
            measure,
            low,
            up,
            tie,
            terminal,
            utility: self.utility.build()?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Price-factor catalog entry.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum FactorsConfig {
    /// `u = e^{σ√Δt}`, `d = 1/u`.
    Crr { sigma: f64 },
    /// Explicit `0 < d < u`.
    Explicit { up: f64, down: f64 },
}

/// Market block of the option schema.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MarketConfig {
    pub spot: f64,
    pub rate: f64,
    /// Physical drift; recorded but never priced.
    #[serde(default)]
    pub drift: f64,
    pub factors: FactorsConfig,
}

/// Serde mirror of the JSON game-option schema: payoffs are formulas over
/// `(t, S)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GameOptionConfig {
    pub grid: GridConfig,
    pub market: MarketConfig,
    /// Exercise value, formula over `t, S`.
    pub holder: Expr,
    /// Cancellation value, formula over `t, S`.
    pub cancel: Expr,
    /// Expiry payoff; defaults to the exercise value at expiry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal: Option<Expr>,
}

impl GameOptionConfig {
    /// Parses a configuration from JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Builds and validates the option.
    pub fn build(&self) -> Result<GameOption> {
        let grid = TimeGrid::new(self.grid.horizon, self.grid.steps)?;
        let factors = match self.market.factors {
            FactorsConfig::Crr { sigma } => LatticeFactors::Crr { sigma },
            FactorsConfig::Explicit { up, down } => LatticeFactors::Explicit { up, down },
        };
        let mut market = MarketModel::new(self.market.spot, self.market.rate, factors, grid)?;
        market.drift = self.market.drift;
        let terminal = self.terminal.clone().unwrap_or_else(|| self.holder.clone());
        let option = GameOption {
            market,
            holder: Payoff::formula(self.holder.clone())?,
            cancel: Payoff::formula(self.cancel.clone())?,
            terminal: Payoff::formula(terminal)?,
        };
        option.validate()?;
        Ok(option)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn constant_game(n: usize, low: f64, up: f64, terminal: f64, utility: Utility) -> DynkinGameSpec {
        let grid = TimeGrid::new(1.0, n).unwrap();
        DynkinGameSpec {
            grid,
            measure: BranchMeasure::symmetric(),
            low: AdaptedField::constant(n, low),
            up: AdaptedField::constant(n, up),
            tie: AdaptedField::constant(n, 0.5 * (low + up)),
            terminal: vec![terminal; n + 1],
            utility,
        }
    }

    #[test]
    fn recursion_agrees_bitwise_with_the_reflecting_solver() {
        let n = 6;
        let grid = TimeGrid::new(1.5, n).unwrap();
        let low = AdaptedField::from_fn(n, |node| -0.6 - 0.02 * node.step as f64);
        let up = AdaptedField::from_fn(n, |node| 0.4 + 0.05 * node.brownian(&grid).abs());
        let terminal: Vec<f64> =
            (0..=n).map(|level| (0.7 * (level as f64 - 3.0) * 0.3).clamp(-0.6, 0.4)).collect();
        let game = DynkinGameSpec {
            grid,
            measure: BranchMeasure::symmetric(),
            low: low.clone(),
            up: up.clone(),
            tie: low.clone(),
            terminal: terminal.clone(),
            utility: Utility::Identity,
        };
        let dynkin = dynkin_value(&game).unwrap();

        let spec = ProblemSpec::assemble(
            grid,
            BranchMeasure::symmetric(),
            DriverF::Zero,
            DriverG::Zero,
            low,
            up,
            None,
            terminal,
            AdaptedField::constant(n - 1, 0.0),
            AdaptedField::constant(n - 1, 0.0),
            AdaptedField::constant(n - 1, 0.0),
            AdaptedField::constant(n - 1, 0.0),
            AdaptedField::constant(n, 0.0),
        )
        .unwrap();
        let sol = solve(&spec, &SolverConfig::default()).unwrap();
        for step in 0..=n {
            for node in grid.nodes_at(step) {
                assert!(
                    dynkin.value.get(node) == sol.y.get(node),
                    "recursions disagree at {node:?}"
                );
            }
        }
    }

    #[test]
    fn saddle_holds_for_every_enumerated_rule_pair() {
        let n = 3;
        let grid = TimeGrid::new(1.0, n).unwrap();
        let game = DynkinGameSpec {
            grid,
            measure: BranchMeasure::new(0.45).unwrap(),
            low: AdaptedField::from_fn(n, |node| {
                -0.2 - 0.1 * (node.step as f64) + 0.05 * node.level as f64
            }),
            up: AdaptedField::from_fn(n, |node| 0.3 + 0.04 * node.level as f64),
            tie: AdaptedField::from_fn(n, |node| 0.05 * node.level as f64),
            terminal: (0..=n).map(|level| 0.1 * level as f64 - 0.2).collect(),
            utility: Utility::Identity,
        };
        let report = saddle_check(&game, n).unwrap();
        assert_eq!(report.rules_per_side, 128);
        assert!(report.within_tolerance(), "{report:?}");
    }

    #[test]
    fn saddle_survives_a_nonlinear_utility() {
        let game = constant_game(3, -0.4, 0.5, 0.1, Utility::Exponential { theta: 0.7 });
        let report = saddle_check(&game, 3).unwrap();
        assert!(report.within_tolerance(), "{report:?}");
    }

    #[test]
    fn never_stopping_pays_expected_terminal_utility() {
        let n = 3;
        let game = constant_game(n, -1.0, 1.0, 0.25, Utility::Affine { scale: 2.0, offset: 1.0 });
        let never = StoppingRule::never(n, n);
        let val = evaluate_payoff(&game, &never, &never).unwrap();
        assert_relative_eq!(val, 2.0 * 0.25 + 1.0, epsilon = 1e-14);
    }

    #[test]
    fn utility_validation_rejects_decreasing_parameterizations() {
        assert!(Utility::Affine { scale: -1.0, offset: 0.0 }.validate().is_err());
        assert!(Utility::Power { shift: 0.0, exponent: 0.0 }.validate().is_err());
        assert!(Utility::Exponential { theta: -0.5 }.validate().is_err());
        assert!(Utility::Power { shift: 1.0, exponent: 0.5 }.validate().is_ok());
    }

    fn worked_option(n: usize, penalty: f64) -> GameOption {
        let grid = TimeGrid::new(n as f64, n).unwrap();
        let market = MarketModel::new(
            100.0,
            0.0,
            LatticeFactors::Explicit { up: 1.2, down: 0.8 },
            grid,
        )
        .unwrap();
        let put = |s: f64| (100.0 - s).max(0.0);
        GameOption {
            market,
            holder: Payoff::Custom { label: "put", f: Arc::new(move |_, s| put(s)) },
            cancel: Payoff::Custom {
                label: "put plus penalty",
                f: Arc::new(move |_, s| put(s) + penalty),
            },
            terminal: Payoff::Custom { label: "put at expiry", f: Arc::new(move |_, s| put(s)) },
        }
    }

    #[test]
    fn one_step_worked_example_prices_at_the_penalty() {
        let option = worked_option(1, 5.0);
        let sol = price_game_option(&option, &SolverConfig::default()).unwrap();
        assert_relative_eq!(sol.q_star, 0.5, epsilon = 1e-15);
        assert_relative_eq!(sol.initial_price(), 5.0, epsilon = 1e-12);
        // The issuer cancels immediately: continuation would cost E[ξ] = 10.
        assert!(sol.stop_cancel.get(Node::root()) >= 0.5);
        // Same value through the Dynkin-game route.
        let game = DynkinGameSpec {
            grid: option.market.grid,
            measure: option.market.risk_neutral().unwrap(),
            low: sol.discounted_spec.low.clone(),
            up: sol.discounted_spec.up.clone(),
            tie: sol.discounted_spec.low.clone(),
            terminal: sol.discounted_spec.terminal.clone(),
            utility: Utility::Identity,
        };
        let dynkin = dynkin_value(&game).unwrap();
        assert_relative_eq!(dynkin.root_value(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn huge_penalty_reduces_to_the_american_put() {
        let n = 16;
        let option = worked_option(n, 1e6);
        let sol = price_game_option(&option, &SolverConfig::default()).unwrap();

        // Independent oracle: plain American-put recursion at r = 0.
        let (u, d) = option.market.step_factors();
        let q = 0.5;
        let price =
            |node: Node| 100.0 * u.powi(node.level as i32) * d.powi((node.step - node.level) as i32);
        let mut v: Vec<f64> = (0..=n)
            .map(|level| (100.0 - price(Node { step: n, level })).max(0.0))
            .collect();
        for step in (0..n).rev() {
            let mut next = vec![0.0; step + 1];
            for level in 0..=step {
                let node = Node { step, level };
                let cont = q * v[level + 1] + (1.0 - q) * v[level];
                next[level] = cont.max((100.0 - price(node)).max(0.0));
            }
            v = next;
        }
        assert_abs_diff_eq!(sol.initial_price(), v[0], epsilon = 1e-12);
    }

    #[test]
    fn hedge_superreplicates_along_every_path() {
        let option = worked_option(10, 2.0);
        let sol = price_game_option(&option, &SolverConfig::default()).unwrap();
        let report = verify_hedge(&option, &sol).unwrap();
        assert_eq!(report.paths, 1 << 10);
        assert!(report.worst_shortfall <= HEDGE_TOL, "{report:?}");
        assert!(report.hedge_match <= HEDGE_TOL, "{report:?}");
    }

    #[test]
    fn mispriced_market_is_rejected_as_arbitrage() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let market = MarketModel::new(
            100.0,
            0.0,
            LatticeFactors::Explicit { up: 1.1, down: 1.05 },
            grid,
        )
        .unwrap();
        let err = market.risk_neutral().unwrap_err();
        assert!(matches!(err, Error::Arbitrage { .. }), "{err}");
    }

    fn one_step_game(terminal: [f64; 2]) -> DynkinGameSpec {
        // Band [1, 3] at the root, wide open at expiry so that any E[ξ] can
        // be realized.
        let grid = TimeGrid::new(1.0, 1).unwrap();
        DynkinGameSpec {
            grid,
            measure: BranchMeasure::symmetric(),
            low: AdaptedField::from_fn(1, |node| if node.step == 0 { 1.0 } else { -10.0 }),
            up: AdaptedField::from_fn(1, |node| if node.step == 0 { 3.0 } else { 10.0 }),
            tie: AdaptedField::constant(1, 2.0),
            terminal: vec![terminal[0], terminal[1]],
            utility: Utility::Identity,
        }
    }

    #[test]
    fn one_step_values_are_the_clamped_expectations() {
        // min(U₀, max(L₀, E[ξ])) with L₀ = 1, U₀ = 3 and nobody stopped at
        // the root when the expectation falls strictly inside the band.
        let mid = dynkin_value(&one_step_game([1.0, 3.0])).unwrap(); // E = 2
        assert_relative_eq!(mid.root_value(), 2.0, epsilon = 1e-15);
        assert!(mid.stop_up.get(Node::root()) < 0.5);
        assert!(mid.stop_low.get(Node::root()) < 0.5);

        let high = dynkin_value(&one_step_game([3.0, 7.0])).unwrap(); // E = 5
        assert_relative_eq!(high.root_value(), 3.0, epsilon = 1e-15);
        assert!(high.stop_up.get(Node::root()) >= 0.5);

        let low = dynkin_value(&one_step_game([-2.0, 2.0])).unwrap(); // E = 0
        assert_relative_eq!(low.root_value(), 1.0, epsilon = 1e-15);
        assert!(low.stop_low.get(Node::root()) >= 0.5);
    }

    #[test]
    fn affine_utility_rescales_values_but_not_stopping_sets() {
        let n = 4;
        let grid = TimeGrid::new(1.0, n).unwrap();
        let base = DynkinGameSpec {
            grid,
            measure: BranchMeasure::new(0.45).unwrap(),
            low: AdaptedField::from_fn(n, |node| -0.3 - 0.05 * node.step as f64),
            up: AdaptedField::from_fn(n, |node| 0.2 + 0.03 * node.level as f64),
            tie: AdaptedField::constant(n, 0.0),
            terminal: (0..=n).map(|level| 0.12 * level as f64 - 0.25).collect(),
            utility: Utility::Identity,
        };
        let mut scaled = base.clone();
        scaled.utility = Utility::Affine { scale: 2.5, offset: 0.75 };
        let a = dynkin_value(&base).unwrap();
        let b = dynkin_value(&scaled).unwrap();
        assert_relative_eq!(b.root_value(), 2.5 * a.root_value() + 0.75, epsilon = 1e-12);
        for step in 0..n {
            for node in grid.nodes_at(step) {
                assert_eq!(
                    a.stop_up.get(node) >= 0.5,
                    b.stop_up.get(node) >= 0.5,
                    "cancel sets differ at {node:?}"
                );
                assert_eq!(
                    a.stop_low.get(node) >= 0.5,
                    b.stop_low.get(node) >= 0.5,
                    "exercise sets differ at {node:?}"
                );
            }
        }
    }

    #[test]
    fn pinched_constant_option_replicates_with_zero_stock() {
        let config = GameOptionConfig::from_json(
            r#"{
                "grid": {"T": 1.0, "N": 6},
                "market": {"spot": 50.0, "rate": 0.05,
                           "factors": {"kind": "crr", "params": {"sigma": 0.3}}},
                "holder": "7",
                "cancel": "7"
            }"#,
        )
        .unwrap()
        .build()
        .unwrap();
        let sol = price_game_option(&config, &SolverConfig::default()).unwrap();
        assert_relative_eq!(sol.initial_price(), 7.0, epsilon = 1e-12);
        assert_eq!(sol.gamma.max_abs(), 0.0);
        let report = verify_hedge(&config, &sol).unwrap();
        assert!(report.worst_shortfall <= 1e-12, "{report:?}");
        assert!(report.hedge_match <= 1e-15, "{report:?}");
    }

    #[test]
    fn dynkin_config_builds_the_one_step_example() {
        let game = DynkinConfig::from_json(
            r#"{
                "grid": {"T": 1.0, "N": 1},
                "L": {"kind": "constant", "params": {"value": 1.0}},
                "U": {"kind": "constant", "params": {"value": 3.0}},
                "Q": {"kind": "constant", "params": {"value": 2.0}},
                "terminal": {"kind": "affine", "params": {"intercept": 2.0, "slope": 1.0}}
            }"#,
        )
        .unwrap()
        .build()
        .unwrap();
        let sol = dynkin_value(&game).unwrap();
        assert_relative_eq!(sol.root_value(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn option_config_builds_the_worked_example() {
        let option = GameOptionConfig::from_json(
            r#"{
                "grid": {"T": 1.0, "N": 1},
                "market": {"spot": 100.0, "rate": 0.0,
                           "factors": {"kind": "explicit", "params": {"up": 1.2, "down": 0.8}}},
                "holder": "max(100 - S, 0)",
                "cancel": "max(100 - S, 0) + 5"
            }"#,
        )
        .unwrap()
        .build()
        .unwrap();
        let sol = price_game_option(&option, &SolverConfig::default()).unwrap();
        assert_relative_eq!(sol.initial_price(), 5.0, epsilon = 1e-12);
        assert_relative_eq!(sol.q_star, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn game_option_validation_rejects_crossed_payoffs() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let market =
            MarketModel::new(100.0, 0.0, LatticeFactors::Crr { sigma: 0.2 }, grid).unwrap();
        let option = GameOption {
            market,
            holder: Payoff::Custom { label: "high", f: Arc::new(|_, _| 10.0) },
            cancel: Payoff::Custom { label: "low", f: Arc::new(|_, _| 1.0) },
            terminal: Payoff::Custom { label: "mid", f: Arc::new(|_, _| 5.0) },
        };
        assert!(option.validate().is_err());
    }
}
