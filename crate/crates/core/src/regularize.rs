//! Monotone regularization: sup-convolution approximants, truncation of the
//! clock and forcing, and the two-parameter approximation ladder.
//!
//! # Sup-convolution
//!
//! For a level `n > 0` the approximant of a driver `f` is
//!
//! ```text
//! f_n(y, z) = sup_{p,q} { f(p,q) ∨ (−n) − n·|p − y| − n·|q − z| } ,
//! ```
//!
//! an `n`-Lipschitz majorant of `f ∨ (−n)` that decreases pointwise to it as
//! `n → ∞` past the original values. For `f ≤ 0` the supremum is attained
//! inside the L1 ball of radius 1: any farther candidate pays penalty `≥ n`
//! while the anchor `p = y` already achieves `≥ −n`.
//!
//! Evaluation is by discrete supremum over a grid **anchored at the query
//! point** (`p = y + i·h`). Anchoring makes the key order relations exact in
//! floating point, not just up to grid error: the candidate set is identical
//! across levels and the per-candidate values are monotone in `n`, so
//! `f ∨ (−n) ≤ f_{n+1} ≤ f_n ≤ 0` holds with zero slack at every query.
//! The price is a grid-shift error of at most `4hn` in the `n`-Lipschitz
//! modulus. Drivers that read only `y` or only `z` are detected and reduced
//! to a one-dimensional supremum, which is exact for that dependence.
//!
//! # Truncation
//!
//! The load process `T_k = sup_{r≤k}|C_r| + A_k + |R|_k + Σ_{r<k} η_r·Δt`
//! is nondecreasing along paths; the level-`n` truncation keeps an increment
//! at a node active while `T < n` (equivalently until the first hitting step
//! `τ_n`, with `τ_0 = 0`). Like every cumulative field on the lattice it must
//! recombine to be node-storable, and path-dependent data are rejected.
//!
//! # Ladder
//!
//! On instances with `f ≤ 0`, `g ≤ 0` and nonnegative forcing, the family
//! `Y^{n,i}` solved with `(f_n, g_n, ΔA·1{T<n}, ΔR⁺·1{T<i})` is nodewise
//! nondecreasing in `i` (nested forcing masks) and nonincreasing in `n`
//! (pointwise-decreasing drivers against a growing clock with `g ≤ 0`). The
//! reflection increments order oppositely in `i`. The ladder solves the grid
//! of instances and reports the worst ordering violation of each kind.

use std::sync::Arc;

use crate::error::Error;
use crate::lattice::{AdaptedField, Node};
use crate::problem::{DriverF, DriverG, ProblemSpec, StepCtx};
use crate::solver::{solve, LatticeSolution, SolverConfig};
use crate::Result;

/// Default sup-convolution grid pitch.
pub const DEFAULT_PITCH: f64 = 1e-3;

fn check_level_pitch(n: f64, h: f64) -> Result<()> {
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::invalid(format!("sup-convolution level must be positive, got {n}")));
    }
    if !(h > 0.0 && h <= 1.0) {
        return Err(Error::invalid(format!("sup-convolution pitch must lie in (0, 1], got {h}")));
    }
    Ok(())
}

/// One-dimensional anchored discrete sup-convolution.
fn sup1(f: impl Fn(f64) -> f64, x: f64, n: f64, h: f64) -> f64 {
    let r = (1.0 / h).ceil() as i64;
    let mut best = f(x).max(-n);
    for i in 1..=r {
        let d = i as f64 * h;
        let penalty = n * d;
        for p in [x + d, x - d] {
            let v = f(p).max(-n) - penalty;
            if v > best {
                best = v;
            }
        }
    }
    best
}

/// Two-dimensional anchored discrete sup-convolution over the L1 ball.
fn sup2(f: impl Fn(f64, f64) -> f64, x: f64, w: f64, n: f64, h: f64) -> f64 {
    let r = (1.0 / h).ceil() as i64;
    let mut best = f(x, w).max(-n);
    for i in -r..=r {
        let rem = r - i.abs();
        for j in -rem..=rem {
            if i == 0 && j == 0 {
                continue;
            }
            let d = (i.abs() + j.abs()) as f64 * h;
            let v = f(x + i as f64 * h, w + j as f64 * h).max(-n) - n * d;
            if v > best {
                best = v;
            }
        }
    }
    best
}

/// Sup-convolution approximant of a driver `f(y, z)`.
#[derive(Clone)]
pub struct SupConvF {
    base: DriverF,
    n: f64,
    h: f64,
    dep_y: bool,
    dep_z: bool,
}

impl SupConvF {
    /// Builds the level-`n` approximant with pitch `h`.
    pub fn new(base: DriverF, n: f64, h: f64) -> Result<Self> {
        check_level_pitch(n, h)?;
        let (dep_y, dep_z) = f_dependence(&base);
        Ok(SupConvF { base, n, h, dep_y, dep_z })
    }

    /// The approximation level.
    pub fn level(&self) -> f64 {
        self.n
    }

    /// Evaluates `f_n(y, z)`, reducing to a one-dimensional supremum when the
    /// base driver ignores one argument (exact for that dependence).
    pub fn eval(&self, ctx: &StepCtx, y: f64, z: f64) -> f64 {
        match (self.dep_y, self.dep_z) {
            (false, false) => self.base.eval(ctx, y, z).max(-self.n),
            (true, false) => sup1(|p| self.base.eval(ctx, p, z), y, self.n, self.h),
            (false, true) => sup1(|q| self.base.eval(ctx, y, q), z, self.n, self.h),
            (true, true) => sup2(|p, q| self.base.eval(ctx, p, q), y, z, self.n, self.h),
        }
    }

    /// Excess of the approximant over the floored base value at a point
    /// (nonnegative, and pointwise nonincreasing in the level).
    pub fn gap(&self, ctx: &StepCtx, y: f64, z: f64) -> f64 {
        self.eval(ctx, y, z) - self.base.eval(ctx, y, z).max(-self.n)
    }

    /// Wraps the approximant as a driver usable in an instance.
    pub fn into_driver(self) -> DriverF {
        DriverF::Custom {
            label: "sup-convolution f",
            f: Arc::new(move |ctx: &StepCtx, y: f64, z: f64| self.eval(ctx, y, z)),
        }
    }
}

/// Sup-convolution approximant of a clock driver `g(y)`.
#[derive(Clone)]
pub struct SupConvG {
    base: DriverG,
    n: f64,
    h: f64,
    dep_y: bool,
}

impl SupConvG {
    /// Builds the level-`n` approximant with pitch `h`.
    pub fn new(base: DriverG, n: f64, h: f64) -> Result<Self> {
        check_level_pitch(n, h)?;
        let dep_y = g_dependence(&base);
        Ok(SupConvG { base, n, h, dep_y })
    }

    /// The approximation level.
    pub fn level(&self) -> f64 {
        self.n
    }

    /// Evaluates `g_n(y)`.
    pub fn eval(&self, ctx: &StepCtx, y: f64) -> f64 {
        if self.dep_y {
            sup1(|p| self.base.eval(ctx, p), y, self.n, self.h)
        } else {
            self.base.eval(ctx, y).max(-self.n)
        }
    }

    /// Wraps the approximant as a clock driver. The attached magnitude bound
    /// `n` is valid when the base driver is nonpositive, which the ladder's
    /// instance family guarantees.
    pub fn into_driver(self) -> DriverG {
        let bound = Some(self.n);
        DriverG::Custom {
            label: "sup-convolution g",
            g: Arc::new(move |ctx: &StepCtx, y: f64| self.eval(ctx, y)),
            bound,
        }
    }
}

fn f_dependence(driver: &DriverF) -> (bool, bool) {
    use crate::expr::Symbol;
    match driver {
        DriverF::Zero | DriverF::Constant(_) => (false, false),
        DriverF::Linear { a, b } => (*a != 0.0, *b != 0.0),
        DriverF::QuadraticZ { .. } => (false, true),
        DriverF::Formula(e) => {
            let syms = e.symbols();
            (syms.contains(&Symbol::Y), syms.contains(&Symbol::Z))
        }
        DriverF::Custom { .. } => (true, true),
    }
}

fn g_dependence(driver: &DriverG) -> bool {
    use crate::expr::Symbol;
    match driver {
        DriverG::Zero | DriverG::Constant(_) => false,
        DriverG::Linear { a, .. } => *a != 0.0,
        DriverG::Formula(e) => e.symbols().contains(&Symbol::Y),
        DriverG::Custom { .. } => true,
    }
}

// ─────────────────────────────── truncation ───────────────────────────────

/// The nondecreasing load `T_k = sup|C| + A_k + |R|_k + Σ η·Δt` on every
/// node; rejects path-dependent data.
pub fn truncation_load(spec: &ProblemSpec) -> Result<AdaptedField> {
    let n = spec.grid.steps();
    let dt = spec.grid.dt();
    // State: [sup|C| (inclusive), ΣΔA, Σ|ΔR|, Ση·Δt] (sums over earlier steps).
    let mut states: Vec<Vec<Option<[f64; 4]>>> =
        (0..=n).map(|step| vec![None; step + 1]).collect();
    states[0][0] = Some([spec.cap_c.get(Node::root()).abs(), 0.0, 0.0, 0.0]);
    for step in 0..n {
        for level in 0..=step {
            let node = Node { step, level };
            let s = states[step][level].expect("states filled in step order");
            let cum_a = s[1] + spec.da.get(node);
            let cum_r = s[2] + spec.dr_plus.get(node) + spec.dr_minus.get(node);
            let cum_eta = s[3] + spec.eta.get(node) * dt;
            for child in [node.up(), node.down()] {
                let cand = [s[0].max(spec.cap_c.get(child).abs()), cum_a, cum_r, cum_eta];
                match &states[child.step][child.level] {
                    None => states[child.step][child.level] = Some(cand),
                    Some(prev) => {
                        let gap = prev
                            .iter()
                            .zip(cand.iter())
                            .map(|(a, b)| (a - b).abs())
                            .fold(0.0_f64, f64::max);
                        if gap > crate::transform::M_TOL {
                            return Err(Error::PathDependentM {
                                step: child.step,
                                level: child.level,
                                gap,
                            });
                        }
                    }
                }
            }
        }
    }
    let mut load = AdaptedField::constant(n, 0.0);
    for (step, row) in states.iter().enumerate() {
        for (level, state) in row.iter().enumerate() {
            let s = state.expect("all states filled");
            load.set(Node { step, level }, s.iter().sum());
        }
    }
    Ok(load)
}

/// A truncation level together with the load that drives it.
#[derive(Debug, Clone)]
pub struct Truncation {
    /// Threshold `n`; increments stay active while the load is below it.
    pub level: f64,
    /// The load process on every node.
    pub load: AdaptedField,
}

impl Truncation {
    /// Computes the load and fixes the level.
    pub fn new(spec: &ProblemSpec, level: f64) -> Result<Self> {
        Ok(Truncation { level, load: truncation_load(spec)? })
    }

    /// Whether increments at this node are kept (the hitting step has not
    /// been reached strictly before or at this node).
    pub fn active(&self, node: Node) -> bool {
        self.load.get(node) < self.level
    }

    /// Zeroes a per-step increment field outside the active region.
    pub fn mask(&self, field: &AdaptedField) -> AdaptedField {
        AdaptedField::from_fn(field.last_step(), |node| {
            if self.active(node) {
                field.get(node)
            } else {
                0.0
            }
        })
    }
}

/// The instance with clock and forcing increments switched off once the load
/// reaches `level`; drivers and barriers are untouched.
pub fn truncate(spec: &ProblemSpec, level: f64) -> Result<(ProblemSpec, Truncation)> {
    let trunc = Truncation::new(spec, level)?;
    let mut out = spec.clone();
    out.da = trunc.mask(&spec.da);
    out.dr_plus = trunc.mask(&spec.dr_plus);
    out.dr_minus = trunc.mask(&spec.dr_minus);
    Ok((out, trunc))
}

// ───────────────────────────────── ladder ─────────────────────────────────

/// Solutions of the `(n, i)` approximation grid with ordering diagnostics.
#[derive(Debug, Clone)]
pub struct LadderReport {
    /// Driver truncation levels, ascending.
    pub n_levels: Vec<f64>,
    /// Forcing truncation levels, ascending.
    pub i_levels: Vec<f64>,
    /// `solutions[n_idx][i_idx]`.
    pub solutions: Vec<Vec<LatticeSolution>>,
    /// Worst violation of `Y^{n,i} ≤ Y^{n,i+1}` over nodes.
    pub i_violation: f64,
    /// Worst violation of `Y^{n+1,i} ≤ Y^{n,i}` over nodes.
    pub n_violation: f64,
    /// Worst violation of `ΔK⁺` nonincreasing in `i` over nodes.
    pub k_plus_violation: f64,
    /// Worst violation of `ΔK⁻` nondecreasing in `i` over nodes.
    pub k_minus_violation: f64,
}

impl LadderReport {
    /// Root values `Y₀^{n,i}` in the same layout as `solutions`.
    pub fn root_values(&self) -> Vec<Vec<f64>> {
        self.solutions
            .iter()
            .map(|row| row.iter().map(LatticeSolution::root_value).collect())
            .collect()
    }

    /// Largest ordering violation of any kind.
    pub fn max_violation(&self) -> f64 {
        self.i_violation
            .max(self.n_violation)
            .max(self.k_plus_violation)
            .max(self.k_minus_violation)
    }
}

/// Solves the `(n, i)` grid of regularized instances: level-`n`
/// sup-convolution drivers with the clock masked at `n`, and the forcing
/// masked at `i`. Requires nonnegative forcing (`ΔR⁻ ≡ 0`) and enough
/// stability margin for the largest level so the discrete orderings are
/// guaranteed, not accidental.
pub fn ladder(
    spec: &ProblemSpec,
    n_levels: &[f64],
    i_levels: &[f64],
    pitch: f64,
    config: &SolverConfig,
) -> Result<LadderReport> {
    if spec.dr_minus.max_abs() != 0.0 {
        return Err(Error::invalid(
            "the approximation ladder requires nonnegative forcing (ΔR⁻ ≡ 0)".to_string(),
        ));
    }
    if n_levels.is_empty() || i_levels.is_empty() {
        return Err(Error::invalid("ladder needs at least one level per axis".to_string()));
    }
    for levels in [n_levels, i_levels] {
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("ladder levels must be strictly ascending".to_string()));
        }
    }
    let n_max = n_levels.last().copied().unwrap_or(0.0);
    let grid = &spec.grid;
    let q = spec.measure.q();
    let margin = q.min(1.0 - q);
    if n_max * grid.sqrt_dt() / 2.0 >= margin || n_max * grid.dt() >= 1.0 {
        return Err(Error::invalid(format!(
            "ladder level {n_max} breaks the monotonicity margin at Δt = {}: \
             need n·√Δt/2 < min(q, 1−q) and n·Δt < 1",
            grid.dt()
        )));
    }

    let load = Truncation::new(spec, 0.0)?.load;
    let mut solutions: Vec<Vec<LatticeSolution>> = Vec::with_capacity(n_levels.len());
    for &n_level in n_levels {
        let f_n = SupConvF::new(spec.driver_f.clone(), n_level, pitch)?.into_driver();
        let g_n = SupConvG::new(spec.driver_g.clone(), n_level, pitch)?.into_driver();
        let trunc_n = Truncation { level: n_level, load: load.clone() };
        let mut row = Vec::with_capacity(i_levels.len());
        for &i_level in i_levels {
            let trunc_i = Truncation { level: i_level, load: load.clone() };
            let mut inst = spec.clone();
            inst.driver_f = f_n.clone();
            inst.driver_g = g_n.clone();
            inst.da = trunc_n.mask(&spec.da);
            inst.dr_plus = trunc_i.mask(&spec.dr_plus);
            row.push(solve(&inst, config)?);
        }
        solutions.push(row);
    }

    let steps = grid.steps();
    let (mut i_viol, mut n_viol, mut kp_viol, mut km_viol) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
    for ni in 0..n_levels.len() {
        for ii in 0..i_levels.len() {
            let sol = &solutions[ni][ii];
            if ii + 1 < i_levels.len() {
                let next = &solutions[ni][ii + 1];
                for step in 0..=steps {
                    for node in grid.nodes_at(step) {
                        i_viol = i_viol.max(sol.y.get(node) - next.y.get(node));
                        if step < steps {
                            kp_viol =
                                kp_viol.max(next.dk_plus.get(node) - sol.dk_plus.get(node));
                            km_viol =
                                km_viol.max(sol.dk_minus.get(node) - next.dk_minus.get(node));
                        }
                    }
                }
            }
            if ni + 1 < n_levels.len() {
                let lower = &solutions[ni + 1][ii];
                for step in 0..=steps {
                    for node in grid.nodes_at(step) {
                        n_viol = n_viol.max(lower.y.get(node) - sol.y.get(node));
                    }
                }
            }
        }
    }
    Ok(LadderReport {
        n_levels: n_levels.to_vec(),
        i_levels: i_levels.to_vec(),
        solutions,
        i_violation: i_viol,
        n_violation: n_viol,
        k_plus_violation: kp_viol,
        k_minus_violation: km_viol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::lattice::{BranchMeasure, TimeGrid};
    use crate::problem::Coef;
    use approx::assert_abs_diff_eq;

    fn ctx() -> StepCtx {
        StepCtx { node: Node::root(), t: 0.0, b: 0.0 }
    }

    #[test]
    fn quadratic_matches_its_closed_form() {
        // f(z) = −z²: f_n(z) = −z² for |z| ≤ n/2, then the tangent cone
        // n²/4 − n|z| until n/4 + 1, then the floor −n.
        let base = DriverF::QuadraticZ { c: Coef::Const(2.0) };
        let f2 = SupConvF::new(base.clone(), 2.0, 1e-3).unwrap();
        assert_abs_diff_eq!(f2.eval(&ctx(), 0.0, 1.0), -1.0, epsilon = 0.01);
        assert_abs_diff_eq!(f2.eval(&ctx(), 0.0, 0.3), -0.09, epsilon = 0.01);
        assert_abs_diff_eq!(f2.eval(&ctx(), 0.0, 1.2), 1.0 - 2.0 * 1.2, epsilon = 0.01);
        // Floor region is exact: no in-radius candidate beats the anchor.
        assert_abs_diff_eq!(f2.eval(&ctx(), 0.0, 3.0), -2.0, epsilon = 1e-15);
    }

    #[test]
    fn kink_driver_is_reproduced_exactly() {
        // f(y) = −|y| is 1-Lipschitz, so every level n ≥ 1 reproduces
        // max(−|y|, −n) exactly on the anchored grid.
        let base = DriverF::formula(Expr::parse("0 - abs(y)").unwrap()).unwrap();
        let f1 = SupConvF::new(base.clone(), 1.0, 1e-3).unwrap();
        assert_abs_diff_eq!(f1.eval(&ctx(), 0.5, 0.0), -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(f1.eval(&ctx(), 3.0, 0.0), -1.0, epsilon = 1e-15);
        let f4 = SupConvF::new(base, 4.0, 1e-3).unwrap();
        assert_abs_diff_eq!(f4.eval(&ctx(), -2.5, 0.0), -2.5, epsilon = 1e-15);
    }

    #[test]
    fn squeeze_and_monotonicity_hold_with_zero_slack() {
        let base = DriverF::QuadraticZ { c: Coef::Const(1.0) };
        let levels = [1.0, 2.0, 4.0, 8.0, 16.0];
        let approx: Vec<SupConvF> = levels
            .iter()
            .map(|&n| SupConvF::new(base.clone(), n, 1e-2).unwrap())
            .collect();
        let c = ctx();
        for k in 0..40 {
            let z = -4.0 + 0.2 * k as f64;
            let fv = base.eval(&c, 0.0, z);
            let mut prev = f64::INFINITY;
            for a in &approx {
                let v = a.eval(&c, 0.0, z);
                assert!(v <= 0.0, "upper squeeze failed at z = {z}");
                assert!(v >= fv.max(-a.level()), "lower squeeze failed at z = {z}");
                assert!(v <= prev, "monotonicity in n failed at z = {z}");
                prev = v;
            }
        }
    }

    #[test]
    fn gap_decays_monotonically_in_the_level() {
        let base = DriverF::QuadraticZ { c: Coef::Const(2.0) };
        let c = ctx();
        let points: Vec<f64> = (0..20).map(|k| -2.0 + 0.21 * k as f64).collect();
        let mut prev = f64::INFINITY;
        for n in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let a = SupConvF::new(base.clone(), n, 1e-2).unwrap();
            let worst = points.iter().map(|&z| a.gap(&c, 0.0, z)).fold(0.0_f64, f64::max);
            assert!(worst <= prev + 1e-15, "gap grew from {prev} to {worst} at n = {n}");
            assert!(worst >= 0.0);
            prev = worst;
        }
    }

    #[test]
    fn lipschitz_modulus_holds_with_grid_slack() {
        let base = DriverF::QuadraticZ { c: Coef::Const(2.0) };
        let (n, h) = (4.0, 1e-2);
        let a = SupConvF::new(base, n, h).unwrap();
        let c = ctx();
        for k in 0..30 {
            let z1 = -3.0 + 0.2 * k as f64;
            let z2 = z1 + 0.37;
            let diff = (a.eval(&c, 0.0, z1) - a.eval(&c, 0.0, z2)).abs();
            assert!(
                diff <= n * 0.37 + 4.0 * h * n + 1e-12,
                "Lipschitz slack exceeded at z = {z1}"
            );
        }
    }

    #[test]
    fn joint_dependence_uses_the_l1_ball() {
        // f(y, z) = −y − z is 1-Lipschitz in each variable: level 1 already
        // reproduces the value at any interior point.
        let base = DriverF::Linear { a: -1.0, b: -1.0 };
        let a = SupConvF::new(base, 1.0, 0.05).unwrap();
        assert_abs_diff_eq!(a.eval(&ctx(), 0.2, 0.1), -0.3, epsilon = 1e-12);
    }

    #[test]
    fn clock_driver_approximant_stays_in_band() {
        let base = DriverG::formula(Expr::parse("0 - abs(y)").unwrap()).unwrap();
        let g2 = SupConvG::new(base, 2.0, 1e-3).unwrap();
        assert_abs_diff_eq!(g2.eval(&ctx(), -0.7), -0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(g2.eval(&ctx(), 5.0), -2.0, epsilon = 1e-15);
    }

    fn h_instance(n: usize) -> ProblemSpec {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let dt = grid.dt();
        ProblemSpec::assemble(
            grid,
            BranchMeasure::symmetric(),
            DriverF::QuadraticZ { c: Coef::Const(0.5) },
            DriverG::Constant(-0.5),
            AdaptedField::constant(n, -0.3),
            AdaptedField::constant(n, 0.6),
            None,
            (0..=n)
                .map(|level| {
                    let b = (Node { step: n, level }).brownian(&grid);
                    (0.4 * b).clamp(-0.3, 0.6)
                })
                .collect(),
            AdaptedField::constant(n - 1, 0.5 * dt),
            AdaptedField::constant(n - 1, 0.8 * dt),
            AdaptedField::constant(n - 1, 0.0),
            AdaptedField::constant(n - 1, 0.0),
            AdaptedField::constant(n, 0.5),
        )
        .unwrap()
    }

    #[test]
    fn load_accumulates_and_masks_increments() {
        // Load = sup|C| + (rate A + rate R + η)·t = 0.5 + 1.3·t on the
        // h-instance: level 1 switches off from t ≥ 0.5/1.3 ≈ 0.385.
        let spec = h_instance(8);
        let (masked, trunc) = truncate(&spec, 1.0).unwrap();
        assert!(trunc.active(Node::root()));
        assert!(trunc.active(Node { step: 3, level: 1 })); // t = 0.375
        assert!(!trunc.active(Node { step: 4, level: 2 })); // t = 0.5
        assert_abs_diff_eq!(masked.da.get(Node { step: 4, level: 0 }), 0.0);
        assert_abs_diff_eq!(masked.dr_plus.get(Node { step: 5, level: 3 }), 0.0);
        assert!(masked.da.get(Node::root()) > 0.0);

        // Level 0 deactivates everything from the start.
        let trunc0 = Truncation::new(&spec, 0.0).unwrap();
        assert!(!trunc0.active(Node::root()));
    }

    #[test]
    fn path_dependent_load_is_rejected() {
        let n = 3;
        let grid = TimeGrid::new(1.0, n).unwrap();
        let mut spec = h_instance(n);
        spec.da = AdaptedField::from_fn(n - 1, |node| 0.1 * node.brownian(&grid).abs());
        let err = truncation_load(&spec).unwrap_err();
        assert!(matches!(err, Error::PathDependentM { .. }), "{err}");
    }

    #[test]
    fn ladder_orderings_hold_on_the_h_instance() {
        let spec = h_instance(8);
        let report =
            ladder(&spec, &[1.0, 2.0], &[1.0, 2.0], 1e-2, &SolverConfig::default()).unwrap();
        assert!(report.max_violation() <= 1e-10, "{report:?}");
        // The forcing mask genuinely differs between the two i-levels, so the
        // i-ordering is strict somewhere.
        let strict = (0..2).any(|ni| {
            let low = report.solutions[ni][0].root_value();
            let high = report.solutions[ni][1].root_value();
            high - low > 1e-6
        });
        assert!(strict, "forcing truncation had no effect: {:?}", report.root_values());
    }

    #[test]
    fn ladder_rejects_levels_beyond_the_stability_margin() {
        let spec = h_instance(8);
        let err =
            ladder(&spec, &[1.0, 4.0], &[1.0], 1e-2, &SolverConfig::default()).unwrap_err();
        assert!(err.to_string().contains("monotonicity margin"), "{err}");
    }

    #[test]
    fn relative_error_of_ladder_root_values_shrinks_with_n() {
        // With all data bounded the regularized root values approach the
        // unregularized one from above as n grows.
        let spec = h_instance(8);
        let exact = solve(&spec, &SolverConfig::default()).unwrap().root_value();
        let report =
            ladder(&spec, &[0.75, 1.5, 2.5], &[2.5], 1e-2, &SolverConfig::default()).unwrap();
        let roots: Vec<f64> = report.root_values().iter().map(|row| row[0]).collect();
        let gaps: Vec<f64> = roots.iter().map(|r| (r - exact).abs()).collect();
        assert!(gaps[2] <= gaps[0] + 1e-12, "{gaps:?}");
    }
}
