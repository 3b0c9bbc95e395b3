//! Nodewise ordering of doubly reflected solutions.
//!
//! Two instances on the same grid and branch weight are *ordered* when
//!
//! 1. the barriers are ordered nodewise: `L¹ ≤ L²` and `U¹ ≤ U²`,
//! 2. the terminal conditions are ordered: `ξ¹ ≤ ξ²`, and
//! 3. the per-step driver measure of the second dominates the first along
//!    the first solution:
//!    `f¹(y¹, z¹)Δt + g¹(y¹)ΔA¹ + ΔR¹ ≤ f²(y¹, z¹)Δt + g²(y¹)ΔA² + ΔR²`.
//!
//! Under 1–3 the value processes satisfy `Y¹ ≤ Y²` at every node, and on
//! nodes where a barrier coincides the reflection there is ordered too: the
//! larger solution needs at least as much downward push
//! (`ΔK¹⁻ ≤ ΔK²⁻` where `U¹ = U²`) and at most as much upward push
//! (`ΔK²⁺ ≤ ΔK¹⁺` where `L¹ = L²`).
//!
//! The discrete argument needs the per-node map to be monotone in the
//! continuation value, which holds whenever the driver's `y`-sensitivity
//! satisfies `a·Δt < 1` and its `z`-sensitivity satisfies
//! `|b|·√Δt/2 < min(q, 1−q)`; a quadratic `z`-dependence can break the
//! ordering on coarse grids, so fuzzing sticks to `z`-free and linear
//! drivers inside those margins.
//!
//! Static hypotheses (1–2) are checked when the pair is formed; the
//! solution-dependent hypothesis (3) and the conclusions are measured by
//! [`compare`].

use crate::error::Error;
use crate::problem::ProblemSpec;
use crate::solver::{solve, LatticeSolution, SolverConfig};
use crate::Result;

/// Tolerance on the ordering conclusions `Y¹ ≤ Y²` and the reflection
/// increments.
pub const ORDER_TOL: f64 = 1e-10;
/// Barriers closer than this (both finite) count as coinciding.
pub const COINCIDENCE_TOL: f64 = 1e-14;

/// A pair of instances whose static data is ordered.
#[derive(Debug, Clone)]
pub struct OrderedPair {
    pub first: ProblemSpec,
    pub second: ProblemSpec,
}

impl OrderedPair {
    /// Validates grids, branch weights, barrier ordering, and terminal
    /// ordering. The driver-measure hypothesis depends on the first
    /// solution and is checked by [`compare`].
    pub fn new(first: ProblemSpec, second: ProblemSpec) -> Result<Self> {
        let g1 = first.grid;
        let g2 = second.grid;
        if g1.steps() != g2.steps() || g1.horizon() != g2.horizon() {
            return Err(Error::invalid(format!(
                "comparison needs a shared grid, got {} steps over {} vs {} steps over {}",
                g1.steps(),
                g1.horizon(),
                g2.steps(),
                g2.horizon()
            )));
        }
        if first.measure.q() != second.measure.q() {
            return Err(Error::invalid(format!(
                "comparison needs a shared branch weight, got q = {} vs {}",
                first.measure.q(),
                second.measure.q()
            )));
        }
        let n = g1.steps();
        for step in 0..=n {
            for node in g1.nodes_at(step) {
                let checks = [
                    ("lower barriers", first.low.get(node), second.low.get(node)),
                    ("upper barriers", first.up.get(node), second.up.get(node)),
                ];
                for (name, a, b) in checks {
                    // Infinite sentinels compare correctly: −∞ ≤ x ≤ +∞.
                    if a > b {
                        return Err(Error::PairNotOrdered {
                            reason: format!("{name} must satisfy first ≤ second"),
                            step: node.step,
                            level: node.level,
                            gap: a - b,
                        });
                    }
                }
            }
        }
        for level in 0..=n {
            let (a, b) = (first.terminal[level], second.terminal[level]);
            if a > b {
                return Err(Error::PairNotOrdered {
                    reason: "terminal conditions must satisfy first ≤ second".into(),
                    step: n,
                    level,
                    gap: a - b,
                });
            }
        }
        Ok(OrderedPair { first, second })
    }
}

/// Measured ordering conclusions and the solution-dependent hypothesis.
#[derive(Debug, Clone, Copy)]
pub struct ComparisonReport {
    /// Max over nodes of `Y¹ − Y²` (ordered means ≤ 0).
    pub y_violation: f64,
    /// Max over step nodes of `measure¹ − measure²` evaluated at
    /// `(y¹, z¹)` (the hypothesis; ≤ 0 when the pair is truly ordered).
    pub driver_violation: f64,
    /// Max of `ΔK¹⁻ − ΔK²⁻` over nodes with coinciding upper barriers.
    pub k_minus_violation: f64,
    /// Max of `ΔK²⁺ − ΔK¹⁺` over nodes with coinciding lower barriers.
    pub k_plus_violation: f64,
    /// Nodes where the upper barriers coincide.
    pub coinciding_upper: usize,
    /// Nodes where the lower barriers coincide.
    pub coinciding_lower: usize,
}

impl ComparisonReport {
    /// Worst conclusion violation (the hypothesis line is reported
    /// separately).
    pub fn max_violation(&self) -> f64 {
        self.y_violation.max(self.k_minus_violation).max(self.k_plus_violation)
    }

    /// True when every conclusion holds within [`ORDER_TOL`].
    pub fn within_tolerance(&self) -> bool {
        self.max_violation() <= ORDER_TOL
    }
}

fn coincide(a: f64, b: f64) -> bool {
    a.is_finite() && b.is_finite() && (a - b).abs() <= COINCIDENCE_TOL
}

/// Measures the ordering of two already-computed solutions.
pub fn compare_solutions(
    pair: &OrderedPair,
    sol1: &LatticeSolution,
    sol2: &LatticeSolution,
) -> ComparisonReport {
    let grid = pair.first.grid;
    let n = grid.steps();
    let dt = grid.dt();
    let mut report = ComparisonReport {
        y_violation: f64::NEG_INFINITY,
        driver_violation: f64::NEG_INFINITY,
        k_minus_violation: f64::NEG_INFINITY,
        k_plus_violation: f64::NEG_INFINITY,
        coinciding_upper: 0,
        coinciding_lower: 0,
    };
    for step in 0..=n {
        for node in grid.nodes_at(step) {
            report.y_violation =
                report.y_violation.max(sol1.y.get(node) - sol2.y.get(node));
            if step == n {
                continue;
            }

            let (y, z) = (sol1.y.get(node), sol1.z.get(node));
            let ctx1 = pair.first.ctx(node);
            let ctx2 = pair.second.ctx(node);
            let measure1 = pair.first.driver_f.eval(&ctx1, y, z) * dt
                + pair.first.driver_g.eval(&ctx1, y) * pair.first.da.get(node)
                + pair.first.dr(node);
            let measure2 = pair.second.driver_f.eval(&ctx2, y, z) * dt
                + pair.second.driver_g.eval(&ctx2, y) * pair.second.da.get(node)
                + pair.second.dr(node);
            report.driver_violation = report.driver_violation.max(measure1 - measure2);

            if coincide(pair.first.up.get(node), pair.second.up.get(node)) {
                report.coinciding_upper += 1;
                report.k_minus_violation = report
                    .k_minus_violation
                    .max(sol1.dk_minus.get(node) - sol2.dk_minus.get(node));
            }
            if coincide(pair.first.low.get(node), pair.second.low.get(node)) {
                report.coinciding_lower += 1;
                report.k_plus_violation = report
                    .k_plus_violation
                    .max(sol2.dk_plus.get(node) - sol1.dk_plus.get(node));
            }
        }
    }
    report
}

/// Solves both instances and measures the ordering.
pub fn compare(pair: &OrderedPair, config: &SolverConfig) -> Result<ComparisonReport> {
    let sol1 = solve(&pair.first, config)?;
    let sol2 = solve(&pair.second, config)?;
    Ok(compare_solutions(pair, &sol1, &sol2))
}

/// Largest reflection increment on sides disabled by infinite sentinel
/// barriers: `(max ΔK⁺ where L = −∞, max ΔK⁻ where U = +∞)`. Both are
/// exactly zero because `(−∞ − y)⁺ = (y − ∞)⁺ = 0`.
pub fn disabled_side_increments(spec: &ProblemSpec, sol: &LatticeSolution) -> (f64, f64) {
    let n = spec.grid.steps();
    let mut kp = 0.0_f64;
    let mut km = 0.0_f64;
    for step in 0..n {
        for node in spec.grid.nodes_at(step) {
            if spec.low.get(node) == f64::NEG_INFINITY {
                kp = kp.max(sol.dk_plus.get(node));
            }
            if spec.up.get(node) == f64::INFINITY {
                km = km.max(sol.dk_minus.get(node));
            }
        }
    }
    (kp, km)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{AdaptedField, BranchMeasure, TimeGrid};
    use crate::problem::{DriverF, DriverG, NodeFn, ProblemSpec};

    fn base_spec(
        n: usize,
        driver_f: DriverF,
        low: f64,
        up: f64,
        terminal: impl Fn(f64) -> f64,
        dr_rate: f64,
    ) -> ProblemSpec {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let dt = grid.dt();
        let terminal: Vec<f64> = (0..=n)
            .map(|level| {
                terminal((2.0 * level as f64 - n as f64) * grid.sqrt_dt()).clamp(low, up)
            })
            .collect();
        let cap = if matches!(driver_f, DriverF::Linear { b, .. } if b != 0.0) { 1.0 } else { 0.0 };
        ProblemSpec::assemble(
            grid,
            BranchMeasure::symmetric(),
            driver_f,
            DriverG::Zero,
            NodeFn::Constant(low).realize(&grid, n),
            NodeFn::Constant(up).realize(&grid, n),
            None,
            terminal,
            AdaptedField::constant(n - 1, 0.0),
            AdaptedField::constant(n - 1, dr_rate.max(0.0) * dt),
            AdaptedField::constant(n - 1, (-dr_rate).max(0.0) * dt),
            AdaptedField::constant(n - 1, 0.0),
            AdaptedField::constant(n, cap),
        )
        .unwrap()
    }

    #[test]
    fn ordered_forcing_orders_the_solutions_and_increments() {
        let n = 10;
        let first = base_spec(n, DriverF::Zero, -0.5, 0.5, |b| 0.4 * b, -0.3);
        let second = base_spec(n, DriverF::Zero, -0.5, 0.5, |b| 0.4 * b, 0.3);
        let pair = OrderedPair::new(first, second).unwrap();
        let report = compare(&pair, &SolverConfig::default()).unwrap();
        assert!(report.within_tolerance(), "{report:?}");
        assert!(report.driver_violation <= 0.0, "{report:?}");
        // Both barriers coincide everywhere, so every step node is counted.
        let step_nodes = n * (n + 1) / 2;
        assert_eq!(report.coinciding_upper, step_nodes);
        assert_eq!(report.coinciding_lower, step_nodes);
    }

    #[test]
    fn ordered_drivers_order_the_solutions() {
        let n = 12;
        let first = base_spec(n, DriverF::Linear { a: -0.4, b: 0.2 }, -0.8, 0.9, |b| 0.5 * b, 0.0);
        let second =
            base_spec(n, DriverF::Linear { a: -0.4, b: 0.2 }, -0.8, 0.9, |b| 0.5 * b + 0.05, 0.1);
        // Terminal data clamps keep ξ¹ ≤ ξ².
        let pair = OrderedPair::new(first, second).unwrap();
        let report = compare(&pair, &SolverConfig::default()).unwrap();
        assert!(report.within_tolerance(), "{report:?}");
        assert!(report.driver_violation <= 1e-15, "{report:?}");
    }

    #[test]
    fn crossed_barriers_are_rejected_with_the_first_offending_node() {
        let n = 4;
        let first = base_spec(n, DriverF::Zero, -0.2, 0.6, |b| 0.1 * b, 0.0);
        let second = base_spec(n, DriverF::Zero, -0.5, 0.5, |b| 0.1 * b, 0.0);
        let err = OrderedPair::new(first, second).unwrap_err();
        match err {
            Error::PairNotOrdered { reason, gap, .. } => {
                assert!(reason.contains("lower barriers"), "{reason}");
                assert!(gap > 0.0);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn crossed_terminal_data_is_rejected() {
        let n = 4;
        let first = base_spec(n, DriverF::Zero, -0.5, 0.5, |b| 0.2 * b + 0.1, 0.0);
        let second = base_spec(n, DriverF::Zero, -0.5, 0.5, |b| 0.2 * b, 0.0);
        let err = OrderedPair::new(first, second).unwrap_err();
        assert!(matches!(err, Error::PairNotOrdered { .. }), "{err}");
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let first = base_spec(4, DriverF::Zero, -0.5, 0.5, |b| 0.2 * b, 0.0);
        let second = base_spec(5, DriverF::Zero, -0.5, 0.5, |b| 0.2 * b, 0.0);
        assert!(OrderedPair::new(first, second).is_err());
    }

    #[test]
    fn sentinel_barriers_produce_exactly_zero_reflection() {
        let n = 8;
        let grid = TimeGrid::new(1.0, n).unwrap();
        let terminal: Vec<f64> =
            (0..=n).map(|level| 0.3 * (2.0 * level as f64 - n as f64) * grid.sqrt_dt()).collect();
        let spec = ProblemSpec::assemble(
            grid,
            BranchMeasure::symmetric(),
            DriverF::Linear { a: -0.2, b: 0.0 },
            DriverG::Zero,
            NodeFn::Constant(f64::NEG_INFINITY).realize(&grid, n),
            NodeFn::Constant(0.25).realize(&grid, n),
            None,
            terminal.iter().map(|x| x.min(0.25)).collect(),
            AdaptedField::constant(n - 1, 0.0),
            AdaptedField::constant(n - 1, 0.0),
            AdaptedField::constant(n - 1, 0.0),
            AdaptedField::constant(n - 1, 0.0),
            AdaptedField::constant(n, 0.0),
        )
        .unwrap();
        let sol = solve(&spec, &SolverConfig::default()).unwrap();
        let (kp, km) = disabled_side_increments(&spec, &sol);
        assert_eq!(kp, 0.0);
        assert!(km >= 0.0);
        assert!(sol.dk_plus.max_abs() == 0.0);
    }
}
