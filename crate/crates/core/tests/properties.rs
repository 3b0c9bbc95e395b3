//! Property-based tests of invariants that must hold for any valid input:
//! measure and martingale identities on the lattice, order and translation
//! behavior of the reflecting solver, round-trip exactness of the
//! exponential normalization, and the game value staying inside its payoff
//! band.

use proptest::prelude::*;

use drbsde::catalog::{random_dynkin_game, random_validated_instance};
use drbsde::games::dynkin_value;
use drbsde::lattice::{AdaptedField, BranchMeasure, Node, TimeGrid};
use drbsde::problem::{DriverF, DriverG, NodeFn, ProblemSpec};
use drbsde::solver::{residual_report, solve, SolverConfig};
use drbsde::transform::{map_forward, map_inverse, transform};

/// Zero-driver, zero-clock instance with constant barriers around a terminal
/// field; the workhorse for order and translation properties.
fn plain_instance(
    grid: TimeGrid,
    low: f64,
    up: f64,
    terminal: impl Fn(f64) -> f64,
) -> ProblemSpec {
    let n = grid.steps();
    let terminal: Vec<f64> = (0..=n)
        .map(|level| terminal(Node { step: n, level }.brownian(&grid)).clamp(low, up))
        .collect();
    ProblemSpec::assemble(
        grid,
        BranchMeasure::symmetric(),
        DriverF::Zero,
        DriverG::Zero,
        NodeFn::Constant(low).realize(&grid, n),
        NodeFn::Constant(up).realize(&grid, n),
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

fn max_y_diff(a: &drbsde::solver::LatticeSolution, b: &drbsde::solver::LatticeSolution, grid: &TimeGrid) -> f64 {
    let mut worst = 0.0_f64;
    for step in 0..=grid.steps() {
        for node in grid.nodes_at(step) {
            worst = worst.max((a.y.get(node) - b.y.get(node)).abs());
        }
    }
    worst
}

proptest! {
    /// The compensated increments integrate to zero under the branch weights.
    #[test]
    fn compensated_increments_have_zero_mean(
        q in 0.05..0.95_f64,
        steps in 1..32usize,
        horizon in 0.1..4.0_f64,
    ) {
        let grid = TimeGrid::new(horizon, steps).unwrap();
        let measure = BranchMeasure::new(q).unwrap();
        let mean = q * measure.dw_up(&grid) + (1.0 - q) * measure.dw_down(&grid);
        prop_assert!(mean.abs() <= 1e-15);
    }

    /// Conditional expectation plus the representation term reproduces both
    /// child values: `E[V'] + z·ΔW(branch) = V'(branch)`.
    #[test]
    fn martingale_representation_hits_both_branches(
        q in 0.1..0.9_f64,
        steps in 1..12usize,
        intercept in -3.0..3.0_f64,
        slope in -2.0..2.0_f64,
    ) {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let measure = BranchMeasure::new(q).unwrap();
        let field = AdaptedField::from_fn(steps, |node| {
            intercept + slope * node.brownian(&grid)
        });
        for step in 0..steps {
            for node in grid.nodes_at(step) {
                let e = measure.expect_next(&field, node).unwrap();
                let z = measure.martingale_rep(&field, node, &grid).unwrap();
                let up = e + z * measure.dw_up(&grid);
                let down = e + z * measure.dw_down(&grid);
                prop_assert!((up - field.get(node.up())).abs() <= 1e-12);
                prop_assert!((down - field.get(node.down())).abs() <= 1e-12);
            }
        }
    }

    /// Path probabilities are an exact probability distribution.
    #[test]
    fn path_probabilities_sum_to_one(q in 0.05..0.95_f64, steps in 1..=10usize) {
        let measure = BranchMeasure::new(q).unwrap();
        let total: f64 = (0..(1u64 << steps))
            .map(|path| measure.path_probability(path, steps))
            .sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    /// Flat data in a wide band solves to the flat value with no martingale
    /// part and no reflection at all.
    #[test]
    fn flat_data_solves_flat(
        c in -4.0..4.0_f64,
        width in 0.01..2.0_f64,
        steps in 1..24usize,
    ) {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let spec = plain_instance(grid, c - width, c + width, |_| c);
        let sol = solve(&spec, &SolverConfig::default()).unwrap();
        for step in 0..=steps {
            for node in grid.nodes_at(step) {
                prop_assert!((sol.y.get(node) - c).abs() <= 1e-12 * (1.0 + c.abs()));
            }
        }
        prop_assert_eq!(sol.z.max_abs(), 0.0);
        prop_assert_eq!(sol.dk_plus.max_abs(), 0.0);
        prop_assert_eq!(sol.dk_minus.max_abs(), 0.0);
    }

    /// Raising the terminal condition can only raise the solution.
    #[test]
    fn raising_the_terminal_raises_the_solution(
        slope in -1.0..1.0_f64,
        lift in 0.0..0.5_f64,
        steps in 1..16usize,
    ) {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let base = plain_instance(grid, -1.0, 1.0, |b| slope * b);
        let lifted = plain_instance(grid, -1.0, 1.0, |b| slope * b + lift);
        let config = SolverConfig::default();
        let sol_base = solve(&base, &config).unwrap();
        let sol_lifted = solve(&lifted, &config).unwrap();
        for step in 0..=steps {
            for node in grid.nodes_at(step) {
                prop_assert!(sol_lifted.y.get(node) >= sol_base.y.get(node) - 1e-12);
            }
        }
    }

    /// Shifting barriers and terminal together translates the solution.
    #[test]
    fn shifting_all_data_shifts_the_solution(
        shift in -2.0..2.0_f64,
        slope in -1.0..1.0_f64,
        steps in 1..16usize,
    ) {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let base = plain_instance(grid, -0.8, 0.9, |b| slope * b);
        let moved = plain_instance(grid, -0.8 + shift, 0.9 + shift, |b| slope * b + shift);
        let config = SolverConfig::default();
        let sol_base = solve(&base, &config).unwrap();
        let sol_moved = solve(&moved, &config).unwrap();
        for step in 0..=steps {
            for node in grid.nodes_at(step) {
                let gap = (sol_moved.y.get(node) - sol_base.y.get(node) - shift).abs();
                prop_assert!(gap <= 1e-12 * (1.0 + shift.abs()));
            }
        }
    }

    /// Every seed yields an instance the solver handles within its contract.
    #[test]
    fn seeded_instances_solve_within_the_contract(seed in 0..u64::MAX / 2) {
        let spec = random_validated_instance(seed);
        let sol = solve(&spec, &SolverConfig::default()).unwrap();
        let report = residual_report(&spec, &sol);
        prop_assert!(report.within_tolerances(), "{report:?}");
    }

    /// Normalizing a solution and mapping it back is lossless to rounding.
    #[test]
    fn exponential_normalization_round_trips(seed in 0..u64::MAX / 2) {
        let spec = random_validated_instance(seed);
        prop_assume!(spec.barriers_finite());
        let sol = solve(&spec, &SolverConfig::default()).unwrap();
        let bundle = transform(&spec).unwrap();
        let mapped = map_forward(&bundle, &sol);
        let back = map_inverse(&bundle, &mapped).unwrap();
        prop_assert!(max_y_diff(&sol, &back, &spec.grid) <= 1e-10);
    }

    /// The stopping-game value stays inside the utility-composed payoff band
    /// at the root.
    #[test]
    fn game_value_stays_inside_the_payoff_band(seed in 0..u64::MAX / 2) {
        let game = random_dynkin_game(seed);
        let sol = dynkin_value(&game).unwrap();
        let root = Node::root();
        let fl = game.utility.apply(game.low.get(root));
        let fu = game.utility.apply(game.up.get(root));
        prop_assert!(sol.root_value() >= fl && sol.root_value() <= fu);
    }
}
