//! Named reference instances and seeded random families.
//!
//! The named constructors pin down the concrete data used across the
//! integration suite: a do-nothing instance whose solution vanishes
//! identically, a quadratic-`z` instance for comparing the direct and
//! exponentially transformed solution routes under grid refinement, a pure
//! optimal-stopping instance with an independent recursion oracle, two
//! fully loaded instances for the approximation ladder, and the binomial
//! game options (the one-step worked example and the penalized American
//! put).
//!
//! The `random_*` generators draw reproducible instances from a counter
//! based generator seeded explicitly, so every caller referencing a seed
//! gets the same data forever. The ordered-pair family is restricted to
//! `z`-free and linear drivers inside the monotonicity margins
//! `|a|·Δt < 1` and `|b|·√Δt/2 < min(q, 1−q)`; outside those margins the
//! nodewise ordering genuinely fails on coarse grids, so random pairs stay
//! inside them by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compare::OrderedPair;
use crate::expr::Expr;
use crate::games::{DynkinGameSpec, GameOption, LatticeFactors, MarketModel, Payoff, Utility};
use crate::lattice::{AdaptedField, BranchMeasure, Node, TimeGrid};
use crate::problem::{Coef, DriverF, DriverG, NodeFn, ProblemSpec};
use std::sync::Arc;

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn brownian_terminal(
    grid: &TimeGrid,
    low: &AdaptedField,
    up: &AdaptedField,
    f: impl Fn(f64) -> f64,
) -> Vec<f64> {
    let n = grid.steps();
    (0..=n)
        .map(|level| {
            let node = Node { step: n, level };
            f(node.brownian(grid)).clamp(low.get(node), up.get(node))
        })
        .collect()
}

/// Instance with no driver, no clocks, and a band `[−3/4, 1/2]` around the
/// zero terminal condition: the solution vanishes identically, and the
/// exponential transform reproduces that without error.
pub fn zero_instance(n: usize) -> ProblemSpec {
    let grid = TimeGrid::new(1.0, n).unwrap();
    let low = NodeFn::Constant(-0.75).realize(&grid, n);
    let up = NodeFn::Constant(0.5).realize(&grid, n);
    ProblemSpec::assemble(
        grid,
        BranchMeasure::symmetric(),
        DriverF::Zero,
        DriverG::Zero,
        low,
        up,
        None,
        vec![0.0; n + 1],
        AdaptedField::constant(n - 1, 0.0),
        AdaptedField::constant(n - 1, 0.0),
        AdaptedField::constant(n - 1, 0.0),
        AdaptedField::constant(n - 1, 0.0),
        AdaptedField::constant(n, 0.0),
    )
    .unwrap()
}

/// Quadratic-`z` instance used for route-agreement under refinement:
/// `f = −¼|z|²`, barriers `±1/2`, terminal `0.4·tanh(B/2)`.
pub fn refine_instance(n: usize) -> ProblemSpec {
    let grid = TimeGrid::new(1.0, n).unwrap();
    let low = NodeFn::Constant(-0.5).realize(&grid, n);
    let up = NodeFn::Constant(0.5).realize(&grid, n);
    let terminal = brownian_terminal(&grid, &low, &up, |b| 0.4 * (0.5 * b).tanh());
    ProblemSpec::assemble(
        grid,
        BranchMeasure::symmetric(),
        DriverF::QuadraticZ { c: Coef::Const(0.5) },
        DriverG::Zero,
        low,
        up,
        None,
        terminal,
        AdaptedField::constant(n - 1, 0.0),
        AdaptedField::constant(n - 1, 0.0),
        AdaptedField::constant(n - 1, 0.0),
        AdaptedField::constant(n - 1, 0.0),
        AdaptedField::constant(n, 0.5),
    )
    .unwrap()
}

/// Pure two-barrier stopping instance: no driver, no clocks, widening
/// barriers, and an oscillating terminal condition. Solvable by the plain
/// min/max recursion, which serves as an independent oracle.
pub fn snell_instance(n: usize) -> ProblemSpec {
    let grid = TimeGrid::new(1.0, n).unwrap();
    let low = AdaptedField::from_fn(n, |node| -0.3 - 0.05 * node.brownian(&grid).abs());
    let up = AdaptedField::from_fn(n, |node| 0.5 + 0.1 * node.brownian(&grid).abs());
    let terminal = brownian_terminal(&grid, &low, &up, |b| b.sin().clamp(-0.3, 0.5));
    ProblemSpec::assemble(
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
    .unwrap()
}

/// Fully loaded instance for the approximation ladder: quadratic driver,
/// negative clock driver, both clocks running at constant rates.
pub fn clocked_quadratic_instance(n: usize) -> ProblemSpec {
    let grid = TimeGrid::new(1.0, n).unwrap();
    let dt = grid.dt();
    let low = NodeFn::Constant(-0.3).realize(&grid, n);
    let up = NodeFn::Constant(0.6).realize(&grid, n);
    let terminal = brownian_terminal(&grid, &low, &up, |b| 0.4 * b);
    ProblemSpec::assemble(
        grid,
        BranchMeasure::symmetric(),
        DriverF::QuadraticZ { c: Coef::Const(0.5) },
        DriverG::Constant(-0.5),
        low,
        up,
        None,
        terminal,
        AdaptedField::constant(n - 1, 0.5 * dt),
        AdaptedField::constant(n - 1, 0.8 * dt),
        AdaptedField::constant(n - 1, 0.0),
        AdaptedField::constant(n - 1, 0.0),
        AdaptedField::constant(n, 0.5),
    )
    .unwrap()
}

/// Second ladder instance: kinked nonpositive driver `f = −|y|`, constant
/// clock driver, slower clocks, and a persistent driver budget `η`.
pub fn kinked_drift_instance(n: usize) -> ProblemSpec {
    let grid = TimeGrid::new(1.0, n).unwrap();
    let dt = grid.dt();
    let low = NodeFn::Constant(-0.35).realize(&grid, n);
    let up = NodeFn::Constant(0.65).realize(&grid, n);
    let terminal = brownian_terminal(&grid, &low, &up, |b| 0.5 * b);
    ProblemSpec::assemble(
        grid,
        BranchMeasure::symmetric(),
        DriverF::formula(Expr::parse("-abs(y)").unwrap()).unwrap(),
        DriverG::Constant(-0.3),
        low,
        up,
        None,
        terminal,
        AdaptedField::constant(n - 1, 0.4 * dt),
        AdaptedField::constant(n - 1, 0.6 * dt),
        AdaptedField::constant(n - 1, 0.0),
        AdaptedField::constant(n - 1, 0.65),
        AdaptedField::constant(n, 0.0),
    )
    .unwrap()
}

/// One-step cancellable put: spot 100, factors 1.2 / 0.8, zero rate,
/// exercise value `(100 − S)⁺`, cancellation penalty 5. Continuation would
/// cost 10, so the issuer cancels immediately and the price is exactly 5.
pub fn worked_game_option() -> GameOption {
    penalized_put(1, 5.0)
}

/// Cancellable American put on the explicit 1.2 / 0.8 lattice at zero rate:
/// exercise for `(100 − S)⁺`, cancel for the same plus `penalty`.
pub fn penalized_put(n: usize, penalty: f64) -> GameOption {
    let grid = TimeGrid::new(n as f64, n).unwrap();
    let market =
        MarketModel::new(100.0, 0.0, LatticeFactors::Explicit { up: 1.2, down: 0.8 }, grid)
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

fn dynkin_from_fields(
    n: usize,
    q: f64,
    low: impl Fn(Node, &TimeGrid) -> f64,
    gap: impl Fn(Node, &TimeGrid) -> f64,
    tie_frac: f64,
    terminal_frac: impl Fn(usize) -> f64,
    utility: Utility,
) -> DynkinGameSpec {
    let grid = TimeGrid::new(1.0, n).unwrap();
    let low_field = AdaptedField::from_fn(n, |node| low(node, &grid));
    let up_field = AdaptedField::from_fn(n, |node| low(node, &grid) + gap(node, &grid).max(0.0));
    let tie = AdaptedField::from_fn(n, |node| {
        let l = low_field.get(node);
        l + tie_frac * (up_field.get(node) - l)
    });
    let terminal = (0..=n)
        .map(|level| {
            let node = Node { step: n, level };
            let l = low_field.get(node);
            l + terminal_frac(level).clamp(0.0, 1.0) * (up_field.get(node) - l)
        })
        .collect();
    DynkinGameSpec {
        grid,
        measure: BranchMeasure::new(q).unwrap(),
        low: low_field,
        up: up_field,
        tie,
        terminal,
        utility,
    }
}

/// Hand-built games with decisions on at most the first three steps,
/// covering tilted payoffs, ties at either barrier, a pinched band, and
/// every utility family.
pub fn dynkin_catalog() -> Vec<DynkinGameSpec> {
    vec![
        dynkin_from_fields(3, 0.5, |_, _| -0.4, |_, _| 0.9, 0.5, |l| 0.3 * l as f64, Utility::Identity),
        dynkin_from_fields(
            3,
            0.4,
            |node, _| -0.2 - 0.1 * node.step as f64 + 0.05 * node.level as f64,
            |node, _| 0.5 + 0.04 * node.level as f64,
            0.0,
            |l| 1.0 - 0.25 * l as f64,
            Utility::Identity,
        ),
        dynkin_from_fields(
            3,
            0.6,
            |node, grid| 0.2 * node.brownian(grid).sin() - 0.3,
            |_, _| 0.6,
            1.0,
            |l| 0.5 + 0.1 * l as f64,
            Utility::Identity,
        ),
        dynkin_from_fields(3, 0.5, |_, _| -0.4, |_, _| 0.9, 0.5, |l| 0.3 * l as f64, Utility::Exponential { theta: 0.7 }),
        dynkin_from_fields(
            3,
            0.45,
            |node, _| -0.8 + 0.07 * node.level as f64,
            |node, _| 0.4 + 0.1 * node.step as f64,
            0.25,
            |l| 0.2 * l as f64,
            Utility::Power { shift: -2.0, exponent: 2.0 },
        ),
        dynkin_from_fields(
            2,
            0.55,
            |node, _| if node.step == 1 { 0.2 } else { -0.3 },
            |node, _| if node.step == 1 { 0.0 } else { 0.7 },
            0.0,
            |_| 0.5,
            Utility::Affine { scale: 3.0, offset: -2.0 },
        ),
    ]
}

/// Seeded instance family for residual fuzzing: up to 32 steps, every
/// driver family, constant barriers, running clocks, and occasional
/// one-sided bands via infinite sentinels.
pub fn random_validated_instance(seed: u64) -> ProblemSpec {
    let mut rng = rng_for(seed);
    let n = rng.random_range(4..=32usize);
    let horizon = rng.random_range(0.5..=2.0);
    let grid = TimeGrid::new(horizon, n).unwrap();
    let dt = grid.dt();
    let q = rng.random_range(0.3..=0.7);

    let lo = rng.random_range(-1.0..=-0.1_f64);
    let hi = rng.random_range(0.1..=1.0_f64);
    let band = lo.abs().max(hi);
    let (driver_f, eta, cap) = match rng.random_range(0..4u8) {
        0 => (DriverF::Zero, 0.0, 0.0),
        1 => {
            let a = rng.random_range(-1.5..=1.5);
            let b = rng.random_range(-1.0..=1.0);
            (DriverF::Linear { a, b }, a.abs() * band + 0.5 * b * b, if b == 0.0 { 0.0 } else { 1.0 })
        }
        2 => {
            let c = rng.random_range(0.1..=1.0);
            (DriverF::QuadraticZ { c: Coef::Const(c) }, 0.0, c)
        }
        _ => (DriverF::Constant(rng.random_range(-0.5..=0.5)), 0.5, 0.0),
    };
    let driver_g = match rng.random_range(0..2u8) {
        0 => DriverG::Zero,
        _ => DriverG::Constant(rng.random_range(-0.5..=0.0)),
    };

    let low = NodeFn::Constant(if rng.random_range(0..4u8) == 0 { f64::NEG_INFINITY } else { lo })
        .realize(&grid, n);
    let up = NodeFn::Constant(if rng.random_range(0..4u8) == 0 { f64::INFINITY } else { hi })
        .realize(&grid, n);
    let slope = rng.random_range(-0.8..=0.8);
    let terminal = (0..=n)
        .map(|level| {
            let node = Node { step: n, level };
            (slope * node.brownian(&grid)).clamp(lo, hi)
        })
        .collect();

    let a_rate = rng.random_range(0.0..=1.0);
    let rp_rate = rng.random_range(0.0..=0.5);
    let rm_rate = rng.random_range(0.0..=0.5);
    ProblemSpec::assemble(
        grid,
        BranchMeasure::new(q).unwrap(),
        driver_f,
        driver_g,
        low,
        up,
        None,
        terminal,
        AdaptedField::constant(n - 1, a_rate * dt),
        AdaptedField::constant(n - 1, rp_rate * dt),
        AdaptedField::constant(n - 1, rm_rate * dt),
        AdaptedField::constant(n - 1, eta),
        AdaptedField::constant(n, cap),
    )
    .unwrap()
}

/// Seeded ordered pairs inside the monotonicity margins: a shared driver
/// plus nonnegative bumps to the barriers, the terminal condition, and the
/// forcing clock of the second instance.
pub fn random_ordered_pair(seed: u64) -> OrderedPair {
    let mut rng = rng_for(seed);
    let n = rng.random_range(4..=24usize);
    let horizon = rng.random_range(0.5..=1.5);
    let grid = TimeGrid::new(horizon, n).unwrap();
    let dt = grid.dt();
    let q: f64 = rng.random_range(0.35..=0.65);

    // Margins: |a|·Δt < 1 and |b|·√Δt/2 < min(q, 1−q).
    let a = rng.random_range(-1.0..=1.0) * (0.8 / dt).min(1.5);
    let b_cap = (2.0 * q.min(1.0 - q) / grid.sqrt_dt()) * 0.8;
    let b = rng.random_range(-1.0..=1.0) * b_cap.min(1.2);
    let driver_f = match rng.random_range(0..3u8) {
        0 => DriverF::Zero,
        1 => DriverF::Linear { a, b: 0.0 },
        _ => DriverF::Linear { a, b },
    };
    let g0 = rng.random_range(-0.4..=0.0);
    let g_bump = rng.random_range(0.0..=0.3);
    let a_rate = rng.random_range(0.0..=0.8);

    let lo = rng.random_range(-1.0..=-0.2_f64);
    let hi = rng.random_range(0.2..=1.0_f64);
    let lo_sentinel = rng.random_range(0..4u8) == 0;
    let hi_sentinel = rng.random_range(0..4u8) == 0;
    // A quarter of the barrier bumps are exactly zero so the increment
    // ordering on coinciding barriers is exercised, not vacuous.
    let d_low =
        if rng.random_range(0..4u8) == 0 { 0.0 } else { rng.random_range(0.0..=0.15) };
    let d_up = if rng.random_range(0..4u8) == 0 { 0.0 } else { rng.random_range(0.0..=0.15) };
    let d_xi = rng.random_range(0.0..=0.2);
    let d_r = rng.random_range(0.0..=0.4);
    let slope = rng.random_range(-0.6..=0.6);

    let make = |lo: f64, hi: f64, g: DriverG, rp_rate: f64| {
        let low =
            NodeFn::Constant(if lo_sentinel { f64::NEG_INFINITY } else { lo }).realize(&grid, n);
        let up =
            NodeFn::Constant(if hi_sentinel { f64::INFINITY } else { hi }).realize(&grid, n);
        let terminal: Vec<f64> = (0..=n)
            .map(|level| {
                let node = Node { step: n, level };
                (slope * node.brownian(&grid)).clamp(lo, hi)
            })
            .collect();
        ProblemSpec::assemble(
            grid,
            BranchMeasure::new(q).unwrap(),
            driver_f.clone(),
            g,
            low,
            up,
            None,
            terminal,
            AdaptedField::constant(n - 1, a_rate * dt),
            AdaptedField::constant(n - 1, rp_rate * dt),
            AdaptedField::constant(n - 1, 0.0),
            AdaptedField::constant(n - 1, 0.0),
            AdaptedField::constant(n, 0.0),
        )
        .expect("catalog pair data is valid by construction")
    };
    let first = make(lo, hi, DriverG::Constant(g0), 0.1);
    let mut second = make(lo + d_low, hi + d_up, DriverG::Constant(g0 + g_bump), 0.1 + d_r);

    // Terminal bump, preserving ξ¹ ≤ ξ² and the second band exactly.
    for level in 0..=n {
        let node = Node { step: n, level };
        let lifted = (first.terminal[level] + d_xi)
            .clamp(second.low.get(node), second.up.get(node));
        second.terminal[level] = lifted.max(second.terminal[level]);
    }
    OrderedPair::new(first, second).expect("ordered by construction")
}

/// Seeded three-step games across all utility families.
pub fn random_dynkin_game(seed: u64) -> DynkinGameSpec {
    let mut rng = rng_for(seed);
    let q = rng.random_range(0.3..=0.7);
    let l0 = rng.random_range(-1.0..=-0.2);
    let l_step = rng.random_range(-0.1..=0.1);
    let l_level = rng.random_range(-0.1..=0.1);
    let gap0 = rng.random_range(0.1..=0.8);
    let gap_level = rng.random_range(0.0..=0.1);
    let tie_frac = rng.random_range(0.0..=1.0);
    let utility = match rng.random_range(0..4u8) {
        0 => Utility::Identity,
        1 => Utility::Affine {
            scale: rng.random_range(0.5..=3.0),
            offset: rng.random_range(-1.0..=1.0),
        },
        2 => Utility::Power { shift: -3.0, exponent: rng.random_range(0.5..=2.0) },
        _ => Utility::Exponential { theta: rng.random_range(0.2..=1.0) },
    };
    let xi_fracs: Vec<f64> = (0..=3).map(|_| rng.random_range(0.0..=1.0)).collect();
    dynkin_from_fields(
        3,
        q,
        move |node, _| l0 + l_step * node.step as f64 + l_level * node.level as f64,
        move |node, _| gap0 + gap_level * node.level as f64,
        tie_frac,
        move |level| xi_fracs[level],
        utility,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{residual_report, solve, SolverConfig};

    #[test]
    fn named_instances_assemble_and_solve() {
        for spec in [
            zero_instance(8),
            refine_instance(8),
            snell_instance(8),
            clocked_quadratic_instance(8),
            kinked_drift_instance(8),
        ] {
            let sol = solve(&spec, &SolverConfig::default()).unwrap();
            let report = residual_report(&spec, &sol);
            assert!(report.within_tolerances(), "{report:?}");
        }
    }

    #[test]
    fn zero_instance_solution_is_identically_zero() {
        let spec = zero_instance(6);
        let sol = solve(&spec, &SolverConfig::default()).unwrap();
        assert_eq!(sol.y.max_abs(), 0.0);
        assert_eq!(sol.z.max_abs(), 0.0);
    }

    #[test]
    fn random_instances_are_reproducible() {
        let a = random_validated_instance(41);
        let b = random_validated_instance(41);
        assert_eq!(a.grid.steps(), b.grid.steps());
        assert_eq!(a.terminal, b.terminal);
        let c = random_validated_instance(42);
        assert!(a.grid.steps() != c.grid.steps() || a.terminal != c.terminal);
    }

    #[test]
    fn random_pairs_validate_their_ordering_hypotheses() {
        for seed in 0..20 {
            let pair = random_ordered_pair(seed);
            assert_eq!(pair.first.grid.steps(), pair.second.grid.steps());
        }
    }

    #[test]
    fn dynkin_catalog_games_validate() {
        for game in dynkin_catalog() {
            game.validate().unwrap();
        }
        for seed in 0..20 {
            random_dynkin_game(seed).validate().unwrap();
        }
    }
}
