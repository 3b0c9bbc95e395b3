//! Recombining binomial lattice: time grid, nodes, adapted fields, branch
//! measures and adapted stopping rules.
//!
//! The substrate is the standard recombining tree for a Brownian motion
//! sampled at `N` equal steps of length `Δt = T/N`. A node is a pair
//! `(step k, level j)` with `0 ≤ j ≤ k`; its Brownian value is
//! `B(k, j) = (2j − k)·√Δt` and its children are `(k+1, j+1)` (up) and
//! `(k+1, j)` (down). Because the tree recombines, an adapted *node field*
//! stores one value per `(k, j)`.
//!
//! Two one-step operations carry the entire probabilistic structure:
//!
//! * the conditional expectation under an up-probability `q`, and
//! * the exact one-step martingale representation: for any field `X` defined
//!   at step `k+1` there is a unique `z` with
//!   `X(branch) = E[X] + z·ΔW(branch)` on *both* branches, where
//!   `ΔW = ΔB − (2q−1)√Δt` is the compensated (mean-zero) increment. For the
//!   symmetric measure `q = 1/2` the compensation vanishes and
//!   `z = (X_up − X_down) / (2√Δt)`.
//!
//! Stopping rules are adapted to the Brownian filtration, whose step-`k`
//! information is the full up/down history, not the recombined level. Rules
//! are therefore stored as raw stop/continue flags on binary *history* nodes
//! (path prefixes); exhaustive enumeration is guarded by an interior-node
//! limit so it stays a desk-scale tool.

use crate::error::Error;
use crate::Result;

/// Hard cap on the number of interior decision nodes a stopping-rule
/// enumeration may cover: `2^h − 1 ≤ 16` restricts the decision horizon to
/// `h ≤ 4` steps.
pub const MAX_ENUMERATION_NODES: usize = 16;

// ─────────────────────────────── time grid ───────────────────────────────

/// Uniform time grid with `steps` intervals on `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    /// Builds a grid; the horizon must be positive and there must be at least
    /// one step.
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 || steps == 0 {
            return Err(Error::InvalidGrid { horizon, steps });
        }
        Ok(TimeGrid { horizon, steps })
    }

    /// Total horizon `T`.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Step length `Δt = T/N`.
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// `√Δt`, the one-step Brownian increment magnitude.
    pub fn sqrt_dt(&self) -> f64 {
        self.dt().sqrt()
    }

    /// Time coordinate of step `k`, clamped to the exact horizon at the last
    /// step so `time(N) == T` holds without rounding drift.
    pub fn time(&self, step: usize) -> f64 {
        if step >= self.steps {
            self.horizon
        } else {
            step as f64 * self.dt()
        }
    }

    /// Iterator over all nodes of step `k`.
    pub fn nodes_at(&self, step: usize) -> impl Iterator<Item = Node> {
        (0..=step).map(move |level| Node { step, level })
    }
}

// ───────────────────────────────── nodes ─────────────────────────────────

/// A lattice node `(step, level)`: `level` counts the up-moves so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Node {
    /// Time step `k`, `0 ≤ k ≤ N`.
    pub step: usize,
    /// Level `j`, `0 ≤ j ≤ k`.
    pub level: usize,
}

impl Node {
    /// Root node `(0, 0)`.
    pub fn root() -> Node {
        Node { step: 0, level: 0 }
    }

    /// Brownian value `B(k, j) = (2j − k)·√Δt`.
    pub fn brownian(&self, grid: &TimeGrid) -> f64 {
        (2.0 * self.level as f64 - self.step as f64) * grid.sqrt_dt()
    }

    /// Up child `(k+1, j+1)`.
    pub fn up(&self) -> Node {
        Node { step: self.step + 1, level: self.level + 1 }
    }

    /// Down child `(k+1, j)`.
    pub fn down(&self) -> Node {
        Node { step: self.step + 1, level: self.level }
    }
}

// ─────────────────────────────── node fields ─────────────────────────────

/// An adapted field on the recombining lattice: one `f64` per node up to a
/// declared last step, stored as a packed triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedField {
    last_step: usize,
    values: Vec<f64>,
}

fn triangle_offset(step: usize) -> usize {
    step * (step + 1) / 2
}

impl AdaptedField {
    /// Constant field on all nodes up to `last_step` inclusive.
    pub fn constant(last_step: usize, value: f64) -> Self {
        AdaptedField { last_step, values: vec![value; triangle_offset(last_step + 1)] }
    }

    /// Field built from a node function.
    pub fn from_fn(last_step: usize, mut f: impl FnMut(Node) -> f64) -> Self {
        let mut values = Vec::with_capacity(triangle_offset(last_step + 1));
        for step in 0..=last_step {
            for level in 0..=step {
                values.push(f(Node { step, level }));
            }
        }
        AdaptedField { last_step, values }
    }

    /// Last step the field is defined on.
    pub fn last_step(&self) -> usize {
        self.last_step
    }

    /// Checked read: errors when the node lies past the declared last step.
    pub fn value(&self, node: Node) -> Result<f64> {
        if node.step > self.last_step {
            return Err(Error::FieldTooShort { step: node.step, last_step: self.last_step });
        }
        if node.level > node.step {
            return Err(Error::NodeOutOfRange {
                step: node.step,
                level: node.level,
                steps: self.last_step,
            });
        }
        Ok(self.values[triangle_offset(node.step) + node.level])
    }

    /// Unchecked-by-contract read; panics on a node outside the stored triangle.
    pub fn get(&self, node: Node) -> f64 {
        debug_assert!(node.step <= self.last_step && node.level <= node.step);
        self.values[triangle_offset(node.step) + node.level]
    }

    /// Write a single node value.
    pub fn set(&mut self, node: Node, value: f64) {
        debug_assert!(node.step <= self.last_step && node.level <= node.step);
        self.values[triangle_offset(node.step) + node.level] = value;
    }

    /// All values of step `k` as a slice (levels `0..=k`).
    pub fn step_values(&self, step: usize) -> &[f64] {
        assert!(step <= self.last_step, "step {} beyond field end {}", step, self.last_step);
        &self.values[triangle_offset(step)..triangle_offset(step + 1)]
    }

    /// Maximum of `|value|` over the whole stored triangle.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

// ───────────────────────────── branch measure ────────────────────────────

/// One-step branching measure: probability `q` of the up branch.
///
/// `q = 1/2` is the symmetric reference measure of the driving walk; other
/// values realize measure changes such as the risk-neutral measure of a
/// binomial market.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchMeasure {
    q: f64,
}

impl BranchMeasure {
    /// Symmetric measure `q = 1/2`.
    pub fn symmetric() -> Self {
        BranchMeasure { q: 0.5 }
    }

    /// Measure with up-probability `q ∈ (0, 1)`.
    pub fn new(q: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::InvalidProbability { q });
        }
        Ok(BranchMeasure { q })
    }

    /// Up-branch probability.
    pub fn q(&self) -> f64 {
        self.q
    }

    /// Compensated up increment `ΔW(up) = √Δt − (2q−1)√Δt = 2(1−q)√Δt`.
    pub fn dw_up(&self, grid: &TimeGrid) -> f64 {
        2.0 * (1.0 - self.q) * grid.sqrt_dt()
    }

    /// Compensated down increment `ΔW(down) = −√Δt − (2q−1)√Δt = −2q√Δt`.
    pub fn dw_down(&self, grid: &TimeGrid) -> f64 {
        -2.0 * self.q * grid.sqrt_dt()
    }

    /// One-step conditional expectation of a field defined at `node.step + 1`:
    /// `q·X(up) + (1−q)·X(down)`.
    pub fn expect_next(&self, field: &AdaptedField, node: Node) -> Result<f64> {
        if node.step + 1 > field.last_step {
            return Err(Error::NoSuccessor { step: node.step });
        }
        let up = field.value(node.up())?;
        let down = field.value(node.down())?;
        Ok(self.q * up + (1.0 - self.q) * down)
    }

    /// One-step martingale representation coefficient of a field defined at
    /// `node.step + 1`: the unique `z` with
    /// `X(branch) = expect_next + z·ΔW(branch)` exactly on both branches,
    /// namely `z = (X(up) − X(down)) / (2√Δt)` for every `q`.
    pub fn martingale_rep(&self, field: &AdaptedField, node: Node, grid: &TimeGrid) -> Result<f64> {
        if node.step + 1 > field.last_step {
            return Err(Error::NoSuccessor { step: node.step });
        }
        let up = field.value(node.up())?;
        let down = field.value(node.down())?;
        Ok((up - down) / (2.0 * grid.sqrt_dt()))
    }

    /// Probability of a full path of `n` steps encoded as bits
    /// (bit `i` set ⇔ step `i` goes up).
    pub fn path_probability(&self, path: u64, n: usize) -> f64 {
        let ups = (path & mask(n)).count_ones() as i32;
        self.q.powi(ups) * (1.0 - self.q).powi(n as i32 - ups)
    }
}

// ─────────────────────────── paths and prefixes ──────────────────────────

/// Bit mask for the first `n` steps of a path word.
pub fn mask(n: usize) -> u64 {
    if n >= 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

/// Level (number of up-moves) after the first `step` moves of `path`.
pub fn path_level(path: u64, step: usize) -> usize {
    (path & mask(step)).count_ones() as usize
}

/// Node reached by `path` at `step`.
pub fn path_node(path: u64, step: usize) -> Node {
    Node { step, level: path_level(path, step) }
}

// ───────────────────────────── stopping rules ────────────────────────────

/// An adapted stopping rule on the binary history tree: a raw stop/continue
/// flag for every path prefix at steps `0 .. decision_steps`, with a forced
/// stop at the terminal step `steps`.
///
/// Two distinct flag assignments inducing the same first-hitting times are
/// distinct rules; enumeration is over raw assignments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoppingRule {
    steps: usize,
    decision_steps: usize,
    /// Flags indexed by `(2^k − 1) + prefix` for `k < decision_steps`.
    flags: Vec<bool>,
}

fn prefix_index(step: usize, prefix: u64) -> usize {
    ((1usize << step) - 1) + prefix as usize
}

impl StoppingRule {
    /// Number of interior (decision) history nodes for a decision horizon.
    pub fn interior_node_count(decision_steps: usize) -> usize {
        (1usize << decision_steps) - 1
    }

    /// Rule that never stops before the forced terminal stop.
    pub fn never(steps: usize, decision_steps: usize) -> Self {
        StoppingRule {
            steps,
            decision_steps,
            flags: vec![false; Self::interior_node_count(decision_steps)],
        }
    }

    /// Rule induced by a node predicate on the recombining lattice: stop at
    /// the first step `k < decision_steps` whose node satisfies the predicate.
    pub fn from_node_predicate(
        steps: usize,
        decision_steps: usize,
        mut stop: impl FnMut(Node) -> bool,
    ) -> Self {
        let mut rule = Self::never(steps, decision_steps);
        for step in 0..decision_steps {
            for prefix in 0..(1u64 << step) {
                let node = path_node(prefix, step);
                rule.flags[prefix_index(step, prefix)] = stop(node);
            }
        }
        rule
    }

    /// Terminal step at which the rule is forced to stop.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// First step at which the rule stops along `path` (the forced terminal
    /// step when no flag fires).
    pub fn hit(&self, path: u64) -> usize {
        for step in 0..self.decision_steps {
            let prefix = path & mask(step);
            if self.flags[prefix_index(step, prefix)] {
                return step;
            }
        }
        self.steps
    }
}

/// Enumerates every adapted stopping rule with decisions on steps
/// `0 .. decision_steps` and forced stop at `grid.steps()`.
///
/// The number of interior history nodes is `2^decision_steps − 1`; the
/// enumeration is refused beyond [`MAX_ENUMERATION_NODES`] of them. Counts:
/// 2 rules for one decision step, 8 for two, 128 for three.
pub fn enumerate_stopping_rules(grid: &TimeGrid, decision_steps: usize) -> Result<Vec<StoppingRule>> {
    if decision_steps > grid.steps() {
        return Err(Error::invalid(format!(
            "decision horizon {} exceeds grid steps {}",
            decision_steps,
            grid.steps()
        )));
    }
    let interior = StoppingRule::interior_node_count(decision_steps);
    if interior > MAX_ENUMERATION_NODES {
        return Err(Error::EnumerationTooLarge { count: interior, max: MAX_ENUMERATION_NODES });
    }
    let total = 1usize << interior;
    let mut rules = Vec::with_capacity(total);
    for word in 0..total {
        let flags = (0..interior).map(|i| word >> i & 1 == 1).collect();
        rules.push(StoppingRule { steps: grid.steps(), decision_steps, flags });
    }
    Ok(rules)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn grid_rejects_degenerate_parameters() {
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(-1.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(f64::NAN, 4).is_err());
    }

    #[test]
    fn brownian_values_are_symmetric_around_zero() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let node = Node { step: 4, level: 4 };
        assert_relative_eq!(node.brownian(&grid), 4.0 * 0.5, epsilon = 1e-15);
        let mid = Node { step: 4, level: 2 };
        assert_abs_diff_eq!(mid.brownian(&grid), 0.0);
        let low = Node { step: 4, level: 0 };
        assert_relative_eq!(low.brownian(&grid), -2.0, epsilon = 1e-15);
    }

    #[test]
    fn expect_next_matches_hand_value() {
        // field(up) = 3, field(down) = 1 under q = 0.25 averages to 1.5.
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let mut field = AdaptedField::constant(1, 0.0);
        field.set(Node { step: 1, level: 1 }, 3.0);
        field.set(Node { step: 1, level: 0 }, 1.0);
        let measure = BranchMeasure::new(0.25).unwrap();
        let e = measure.expect_next(&field, Node::root()).unwrap();
        assert_relative_eq!(e, 1.5, epsilon = 1e-15);
        let _ = grid;
    }

    #[test]
    fn martingale_rep_matches_hand_value_and_reconstructs() {
        // field(up) = 2, field(down) = 0, dt = 1, q = 1/2 gives z = 1.
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let mut field = AdaptedField::constant(1, 0.0);
        field.set(Node { step: 1, level: 1 }, 2.0);
        field.set(Node { step: 1, level: 0 }, 0.0);
        let measure = BranchMeasure::symmetric();
        let z = measure.martingale_rep(&field, Node::root(), &grid).unwrap();
        assert_relative_eq!(z, 1.0, epsilon = 1e-15);
        let e = measure.expect_next(&field, Node::root()).unwrap();
        assert_abs_diff_eq!(e + z * measure.dw_up(&grid), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e + z * measure.dw_down(&grid), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn reconstruction_is_exact_for_asymmetric_measures() {
        let grid = TimeGrid::new(2.0, 8).unwrap();
        let field = AdaptedField::from_fn(8, |n| {
            let b = n.brownian(&grid);
            b * b - 0.3 * b + 1.7
        });
        let measure = BranchMeasure::new(0.37).unwrap();
        for step in 0..8 {
            for node in grid.nodes_at(step) {
                let e = measure.expect_next(&field, node).unwrap();
                let z = measure.martingale_rep(&field, node, &grid).unwrap();
                let up = field.get(node.up());
                let down = field.get(node.down());
                assert_abs_diff_eq!(e + z * measure.dw_up(&grid), up, epsilon = 1e-12);
                assert_abs_diff_eq!(e + z * measure.dw_down(&grid), down, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn expectation_at_terminal_step_is_an_error() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let field = AdaptedField::constant(2, 1.0);
        let measure = BranchMeasure::symmetric();
        let err = measure.expect_next(&field, Node { step: 2, level: 1 }).unwrap_err();
        assert!(matches!(err, Error::NoSuccessor { step: 2 }));
        let err = measure.martingale_rep(&field, Node { step: 2, level: 0 }, &grid).unwrap_err();
        assert!(matches!(err, Error::NoSuccessor { step: 2 }));
    }

    #[test]
    fn field_reads_past_declared_end_are_errors() {
        let field = AdaptedField::constant(3, 0.0);
        let err = field.value(Node { step: 4, level: 0 }).unwrap_err();
        assert!(matches!(err, Error::FieldTooShort { step: 4, last_step: 3 }));
    }

    #[test]
    fn path_probabilities_sum_to_one() {
        for &(q, n) in &[(0.5, 6), (0.3, 5), (0.91, 7)] {
            let measure = BranchMeasure::new(q).unwrap();
            let total: f64 =
                (0u64..1 << n).map(|path| measure.path_probability(path, n)).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rule_counts_match_decision_horizons() {
        let grid = TimeGrid::new(1.0, 3).unwrap();
        assert_eq!(enumerate_stopping_rules(&grid, 1).unwrap().len(), 2);
        assert_eq!(enumerate_stopping_rules(&grid, 2).unwrap().len(), 8);
        assert_eq!(enumerate_stopping_rules(&grid, 3).unwrap().len(), 128);
    }

    #[test]
    fn enumeration_guard_trips_past_sixteen_interior_nodes() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let err = enumerate_stopping_rules(&grid, 5).unwrap_err();
        assert!(matches!(err, Error::EnumerationTooLarge { count: 31, max: 16 }));
    }

    #[test]
    fn never_rule_hits_only_at_forced_stop() {
        let rule = StoppingRule::never(3, 3);
        for path in 0u64..8 {
            assert_eq!(rule.hit(path), 3);
        }
    }

    #[test]
    fn node_predicate_rule_hits_first_matching_step() {
        // Stop as soon as the level reaches 2.
        let rule = StoppingRule::from_node_predicate(4, 4, |n| n.level >= 2);
        assert_eq!(rule.hit(0b0011), 2); // up, up
        assert_eq!(rule.hit(0b0101), 3); // up, down, up
        assert_eq!(rule.hit(0b0000), 4); // never
    }

    #[test]
    fn rules_are_adapted_to_history_not_level() {
        // A rule may distinguish the two histories reaching (2, 1).
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let rules = enumerate_stopping_rules(&grid, 2).unwrap();
        let distinguishing = rules.iter().any(|r| {
            r.hit(0b01) != r.hit(0b10) // up-down vs down-up
        });
        assert!(distinguishing);
    }
}
