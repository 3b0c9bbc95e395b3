//! Exponential change of variables onto a normalized instance.
//!
//! For a nondecreasing dominating process `m` the map `ȳ = e^{m(y − m)}`
//! carries an instance with bounded-from-above quadratic growth onto one whose
//! data sit in fixed normalized ranges:
//!
//! * barriers satisfy `0 < L̄ ≤ e^{−m²} ≤ Ū ≤ e^{−1} < 1`,
//! * the driver obeys `−(2ηm + z̄²/L̄) ≤ f̄ ≤ 0`,
//! * the clock driver obeys `−1 ≤ ḡ ≤ 0`,
//! * all forcing and clock increments stay nonnegative.
//!
//! The dominating process is
//!
//! ```text
//! m_k = sup_{r≤k} |U_r| + 2·sup_{r≤k} |C_r| + |R|_k + A_k + 1 ,
//! ```
//!
//! so `Δm ≥ ΔA + |ΔR|` holds by construction and the Radon–Nikodym ratios
//! `ΔA/Δm`, `ΔR/Δm` that appear in the transformed clock driver lie in
//! `[−1, 1]`. An Itô expansion of `e^{m(Y−m)}` fixes the remaining data:
//!
//! ```text
//! f̃(s,ȳ,z̄) = ȳ·( m·f(s, ln ȳ/m + m, z̄/(mȳ)) − z̄²/(2ȳ²) )      f̄ = f̃ − ηm
//! g̃(s,ȳ)   = ȳ·( m·g·(ΔA/Δm) + m·(ΔR/Δm) + (m − ln ȳ/m) )      ḡ = (g̃ − 4m)/(8m)
//! ΔĀ = 8m·Δm                                ΔR̄ = ½ΔĀ + ηm·Δt
//! ```
//!
//! The compensator `ΔR̄` restores exactly what the normalizations subtract:
//! `ḡ·ΔĀ = g̃·Δm − 4m·Δm` and `f̄ = f̃ − ηm`, so adding `4m·Δm + ηm·Δt`
//! leaves the generator measure unchanged. Solutions map by
//!
//! ```text
//! Ȳ = e^{m(Y−m)},   Z̄ = mȲZ,   ΔK̄⁺ = mL̄·ΔK⁺,   ΔK̄⁻ = mŪ·ΔK⁻ ,
//! ```
//!
//! and back by the inverse formulas. Both routes solve the same dynamics up
//! to discretization, so root values agree in the fine-grid limit.
//!
//! The transform needs `L ≤ 0 ≤ U` (shift by the separator first when the
//! band does not bracket zero), finite barriers, and a deterministic `m`:
//! path-dependent running suprema or cumulative clocks are rejected rather
//! than silently averaged.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::lattice::{AdaptedField, Node};
use crate::problem::{normalize_g, DriverF, DriverG, ProblemSpec};
use crate::solver::{solve, LatticeSolution, SolverConfig};
use crate::Result;

/// Tolerance for the recombination and branch-equality checks on `m`.
pub const M_TOL: f64 = 1e-10;
/// Tolerance for the normalized-range checks on transformed data.
pub const BOUNDS_TOL: f64 = 1e-12;

/// Builds the dominating process `m_k = sup|U| + 2·sup|C| + |R|_k + A_k + 1`
/// on every node by dynamic programming over the lattice.
///
/// The running suprema and cumulative sums are path functionals; they are
/// node-storable only when every path into a node produces the same state.
/// Disagreeing parents abort with a path-dependence error.
pub fn compute_m(spec: &ProblemSpec) -> Result<AdaptedField> {
    if !spec.barriers_finite() {
        return Err(Error::invalid(
            "the exponential transform requires finite barriers on both sides".to_string(),
        ));
    }
    let n = spec.grid.steps();
    // State per node: [ sup|U|, sup|C|, Σ|ΔR|, ΣΔA ], suprema inclusive of
    // the current node, sums over strictly earlier steps.
    let mut states: Vec<Vec<Option<[f64; 4]>>> =
        (0..=n).map(|step| vec![None; step + 1]).collect();
    let root = Node::root();
    states[0][0] = Some([spec.up.get(root).abs(), spec.cap_c.get(root).abs(), 0.0, 0.0]);

    for step in 0..n {
        for level in 0..=step {
            let node = Node { step, level };
            let s = states[step][level].expect("parent states filled in step order");
            let cum_r = s[2] + spec.dr_plus.get(node) + spec.dr_minus.get(node);
            let cum_a = s[3] + spec.da.get(node);
            for child in [node.up(), node.down()] {
                let cand = [
                    s[0].max(spec.up.get(child).abs()),
                    s[1].max(spec.cap_c.get(child).abs()),
                    cum_r,
                    cum_a,
                ];
                match &states[child.step][child.level] {
                    None => states[child.step][child.level] = Some(cand),
                    Some(prev) => {
                        let gap = prev
                            .iter()
                            .zip(cand.iter())
                            .map(|(a, b)| (a - b).abs())
                            .fold(0.0_f64, f64::max);
                        if gap > M_TOL {
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

    let mut m = AdaptedField::constant(n, 0.0);
    for (step, row) in states.iter().enumerate() {
        for (level, state) in row.iter().enumerate() {
            let s = state.expect("all states filled");
            m.set(Node { step, level }, s[0] + 2.0 * s[1] + s[2] + s[3] + 1.0);
        }
    }
    Ok(m)
}

/// Per-step increments of `m`, required equal on both branches so the
/// transformed clock stays predictable.
fn m_increments(m: &AdaptedField, n: usize) -> Result<AdaptedField> {
    let mut dm = AdaptedField::constant(n - 1, 0.0);
    for step in 0..n {
        for level in 0..=step {
            let node = Node { step, level };
            let base = m.get(node);
            let up = m.get(node.up()) - base;
            let down = m.get(node.down()) - base;
            if (up - down).abs() > M_TOL {
                return Err(Error::BranchDependentIncrement { step, level, up, down });
            }
            dm.set(node, down.max(0.0));
        }
    }
    Ok(dm)
}

/// The transformed instance together with everything needed to map solutions
/// in both directions.
#[derive(Debug, Clone)]
pub struct TransformBundle {
    /// The g-normalized source instance the transform was built from.
    pub original: ProblemSpec,
    /// The normalized-range instance.
    pub transformed: ProblemSpec,
    /// Dominating process on every node.
    pub m: AdaptedField,
    /// Its branch-equal increments per step node.
    pub dm: AdaptedField,
}

/// Builds the exponential transform of an instance whose band brackets zero.
pub fn transform(spec: &ProblemSpec) -> Result<TransformBundle> {
    let n = spec.grid.steps();
    for step in 0..=n {
        for node in spec.grid.nodes_at(step) {
            if spec.low.get(node) > 0.0 || spec.up.get(node) < 0.0 {
                return Err(Error::invalid(format!(
                    "the exponential transform requires L ≤ 0 ≤ U at every node; \
                     violated at step {} level {} — shift by the separator first",
                    step, node.level
                )));
            }
        }
    }
    let norm = normalize_g(spec)?;
    let m = compute_m(&norm)?;
    let dm = m_increments(&m, n)?;

    let low_bar = AdaptedField::from_fn(n, |node| {
        let mv = m.get(node);
        (mv * (norm.low.get(node) - mv)).exp()
    });
    let up_bar = AdaptedField::from_fn(n, |node| {
        let mv = m.get(node);
        (mv * (norm.up.get(node) - mv)).exp()
    });
    for step in 0..=n {
        for node in norm.grid.nodes_at(step) {
            if low_bar.get(node) <= 0.0 {
                return Err(Error::invalid(format!(
                    "transformed lower barrier underflowed to zero at step {} level {}; \
                     the barrier range is too wide for the exponential transform",
                    step, node.level
                )));
            }
        }
    }
    let terminal_bar: Vec<f64> = norm
        .terminal
        .iter()
        .enumerate()
        .map(|(level, &xi)| {
            let mv = m.get(Node { step: n, level });
            (mv * (xi - mv)).exp()
        })
        .collect();

    let dt = norm.grid.dt();
    let da_bar = AdaptedField::from_fn(n - 1, |node| 8.0 * m.get(node) * dm.get(node));
    let dr_plus_bar = AdaptedField::from_fn(n - 1, |node| {
        4.0 * m.get(node) * dm.get(node) + norm.eta.get(node) * m.get(node) * dt
    });
    let dr_minus_bar = AdaptedField::constant(n - 1, 0.0);
    let eta_bar = AdaptedField::from_fn(n - 1, |node| 2.0 * norm.eta.get(node) * m.get(node));
    let cap_bar = AdaptedField::from_fn(n, |node| 2.0 / low_bar.get(node));

    let f_orig = norm.driver_f.clone();
    let (m_f, eta_f, lb_f, ub_f) = (m.clone(), norm.eta.clone(), low_bar.clone(), up_bar.clone());
    let driver_f = DriverF::Custom {
        label: "exp-transformed f",
        f: Arc::new(move |ctx, y_bar, z_bar| {
            let mv = m_f.get(ctx.node);
            let yc = y_bar.max(lb_f.get(ctx.node)).min(ub_f.get(ctx.node));
            let y = yc.ln() / mv + mv;
            let z = z_bar / (mv * yc);
            let ft = yc * (mv * f_orig.eval(ctx, y, z) - (z_bar * z_bar) / (2.0 * yc * yc));
            ft - eta_f.get(ctx.node) * mv
        }),
    };

    let g_orig = norm.driver_g.clone();
    let (m_g, dm_g, lb_g, ub_g) = (m.clone(), dm.clone(), low_bar.clone(), up_bar.clone());
    let (da_g, drp_g, drm_g) = (norm.da.clone(), norm.dr_plus.clone(), norm.dr_minus.clone());
    let driver_g = DriverG::Custom {
        label: "exp-transformed g",
        g: Arc::new(move |ctx, y_bar| {
            let mv = m_g.get(ctx.node);
            let dmv = dm_g.get(ctx.node);
            let yc = y_bar.max(lb_g.get(ctx.node)).min(ub_g.get(ctx.node));
            let ratio = |num: f64| if dmv > 0.0 { (num / dmv).clamp(-1.0, 1.0) } else { 0.0 };
            let ra = ratio(da_g.get(ctx.node));
            let rr = ratio(drp_g.get(ctx.node) - drm_g.get(ctx.node));
            let y = yc.ln() / mv + mv;
            let gt = yc * (mv * g_orig.eval(ctx, y) * ra + mv * rr + (mv - yc.ln() / mv));
            (gt - 4.0 * mv) / (8.0 * mv)
        }),
        bound: Some(1.0),
    };

    let transformed = ProblemSpec::assemble(
        norm.grid,
        norm.measure,
        driver_f,
        driver_g,
        low_bar,
        up_bar,
        None,
        terminal_bar,
        da_bar,
        dr_plus_bar,
        dr_minus_bar,
        eta_bar,
        cap_bar,
    )?;
    Ok(TransformBundle { original: norm, transformed, m, dm })
}

// ───────────────────────────── solution maps ──────────────────────────────

/// Maps a solution of the source instance into transformed variables:
/// `Ȳ = e^{m(Y−m)}`, `Z̄ = mȲZ`, `ΔK̄⁺ = mL̄ΔK⁺`, `ΔK̄⁻ = mŪΔK⁻`.
pub fn map_forward(bundle: &TransformBundle, sol: &LatticeSolution) -> LatticeSolution {
    let n = bundle.original.grid.steps();
    let mut out = sol.clone();
    for step in 0..=n {
        for level in 0..=step {
            let node = Node { step, level };
            let mv = bundle.m.get(node);
            let y_bar = (mv * (sol.y.get(node) - mv)).exp();
            out.y.set(node, y_bar);
            if step < n {
                out.z.set(node, mv * y_bar * sol.z.get(node));
                let lb = bundle.transformed.low.get(node);
                let ub = bundle.transformed.up.get(node);
                out.dk_plus.set(node, mv * lb * sol.dk_plus.get(node));
                out.dk_minus.set(node, mv * ub * sol.dk_minus.get(node));
            }
        }
    }
    out
}

/// Maps a solution of the transformed instance back to source variables:
/// `Y = ln Ȳ/m + m`, `Z = Z̄/(mȲ)`, `ΔK⁺ = ΔK̄⁺/(mL̄)`, `ΔK⁻ = ΔK̄⁻/(mŪ)`.
///
/// Errors when a transformed value is not strictly positive (the logarithm is
/// undefined there, so the candidate cannot come from the transform).
pub fn map_inverse(bundle: &TransformBundle, sol: &LatticeSolution) -> Result<LatticeSolution> {
    let n = bundle.original.grid.steps();
    let mut out = sol.clone();
    for step in 0..=n {
        for level in 0..=step {
            let node = Node { step, level };
            let mv = bundle.m.get(node);
            let y_bar = sol.y.get(node);
            if !(y_bar > 0.0 && y_bar.is_finite()) {
                return Err(Error::InverseUndefined { step, level, value: y_bar });
            }
            out.y.set(node, y_bar.ln() / mv + mv);
            if step < n {
                out.z.set(node, sol.z.get(node) / (mv * y_bar));
                let lb = bundle.transformed.low.get(node);
                let ub = bundle.transformed.up.get(node);
                out.dk_plus.set(node, sol.dk_plus.get(node) / (mv * lb));
                out.dk_minus.set(node, sol.dk_minus.get(node) / (mv * ub));
            }
        }
    }
    Ok(out)
}

/// Transforms, solves the normalized instance, and maps the solution back.
pub fn solve_via_transform(
    spec: &ProblemSpec,
    config: &SolverConfig,
) -> Result<(LatticeSolution, TransformBundle)> {
    let bundle = transform(spec)?;
    let sol_bar = solve(&bundle.transformed, config)?;
    let sol = map_inverse(&bundle, &sol_bar)?;
    Ok((sol, bundle))
}

// ───────────────────────────── range checks ───────────────────────────────

/// Worst-case violations of the normalized ranges, checked at every node and
/// on random in-band `(ȳ, z̄)` samples.
#[derive(Debug, Clone, Copy)]
pub struct TransformBoundsReport {
    /// Violation of `0 < L̄ ≤ e^{−m²} ≤ Ū ≤ e^{−1}` and `m ≥ 1` over nodes.
    pub band_chain: f64,
    /// Violation of `L̄ ≤ ξ̄ ≤ Ū` at terminal nodes.
    pub terminal_band: f64,
    /// Max of `f̄` above zero over samples.
    pub f_upper: f64,
    /// Violation of `f̄ ≥ −(2ηm + z̄²/L̄)` over samples.
    pub f_lower: f64,
    /// Distance of `ḡ` outside `[−1, 0]` over samples.
    pub g_band: f64,
    /// Violation of `|g̃| ≤ 4m` over samples (`g̃` recovered as `8m·ḡ + 4m`).
    pub g_raw: f64,
    /// Violation of `Δm ≥ ΔA + |ΔR|`, `ΔĀ ≥ 0`, `ΔR̄ ≥ 0` over step nodes.
    pub increments: f64,
    /// Number of `(node, ȳ, z̄)` driver samples taken.
    pub samples: usize,
}

impl TransformBoundsReport {
    /// Largest violation across all checked ranges.
    pub fn max_violation(&self) -> f64 {
        self.band_chain
            .max(self.terminal_band)
            .max(self.f_upper)
            .max(self.f_lower)
            .max(self.g_band)
            .max(self.g_raw)
            .max(self.increments)
    }

    /// True when every range holds within [`BOUNDS_TOL`].
    pub fn within_tolerance(&self) -> bool {
        self.max_violation() <= BOUNDS_TOL
    }
}

/// Samples the transformed data against its advertised normalized ranges:
/// the barrier chain nodewise, the driver ranges at `samples_per_node` random
/// in-band `(ȳ, z̄)` pairs per step node, and increment domination.
pub fn check_bounds(
    bundle: &TransformBundle,
    samples_per_node: usize,
    seed: u64,
) -> TransformBoundsReport {
    let spec = &bundle.transformed;
    let orig = &bundle.original;
    let n = spec.grid.steps();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TransformBoundsReport {
        band_chain: 0.0,
        terminal_band: 0.0,
        f_upper: 0.0,
        f_lower: 0.0,
        g_band: 0.0,
        g_raw: 0.0,
        increments: 0.0,
        samples: 0,
    };

    for (level, &xi) in spec.terminal.iter().enumerate() {
        let node = Node { step: n, level };
        let (lb, ub) = (spec.low.get(node), spec.up.get(node));
        report.terminal_band = report.terminal_band.max(lb - xi).max(xi - ub);
    }

    for step in 0..=n {
        for node in spec.grid.nodes_at(step) {
            let mv = bundle.m.get(node);
            let (lb, ub) = (spec.low.get(node), spec.up.get(node));
            let mid = (-mv * mv).exp();
            let chain = [
                1.0 - mv,
                if lb > 0.0 { 0.0 } else { f64::INFINITY },
                lb - mid,
                mid - ub,
                ub - (-1.0_f64).exp(),
            ];
            for c in chain {
                report.band_chain = report.band_chain.max(c);
            }
            if step == n {
                continue;
            }

            let dmv = bundle.dm.get(node);
            let need = orig.da.get(node) + orig.dr_plus.get(node) + orig.dr_minus.get(node);
            report.increments = report
                .increments
                .max(-dmv)
                .max(need - dmv)
                .max(-spec.da.get(node))
                .max(-spec.dr_plus.get(node));

            let ctx = spec.ctx(node);
            let eta_bar = spec.eta.get(node);
            let cap_bar = spec.cap_c.get(node);
            for k in 0..samples_per_node {
                let u: f64 = rng.random_range(0.0..=1.0);
                let y_bar = (lb.ln() + u * (ub.ln() - lb.ln())).exp();
                let z_bar = if k % 2 == 0 {
                    mv * y_bar * rng.random_range(-6.0..=6.0)
                } else {
                    rng.random_range(-3.0..=3.0)
                };
                let fv = spec.driver_f.eval(&ctx, y_bar, z_bar);
                report.f_upper = report.f_upper.max(fv);
                let floor = -(eta_bar + 0.5 * cap_bar * z_bar * z_bar);
                report.f_lower = report.f_lower.max(floor - fv);

                let gv = spec.driver_g.eval(&ctx, y_bar);
                report.g_band = report.g_band.max(gv).max(-1.0 - gv);
                let g_raw = 8.0 * mv * gv + 4.0 * mv;
                report.g_raw = report.g_raw.max(g_raw.abs() - 4.0 * mv);
                report.samples += 1;
            }
        }
    }
    report
}
