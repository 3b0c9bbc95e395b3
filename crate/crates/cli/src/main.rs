//! Command-line front end for the doubly reflected lattice laboratory.
//!
//! Four modes, one per subcommand:
//!
//! * `solve`   — build a reflected instance from JSON, run the backward
//!   solver, report the root value, expected reflection budgets, and the
//!   residual audit; `--refine` instead tabulates the direct and
//!   exponentially transformed routes over `N ∈ {8, 16, 32, 64}`.
//! * `dynkin`  — value a stopping game, report the optimal rules, and (on
//!   small trees) audit the saddle property by exhaustive rule enumeration.
//! * `option`  — price a cancellable claim on the binomial market, extract
//!   the hedge, and (on small trees) audit super-replication pathwise.
//! * `verify`  — fuzz seeded ordered instance pairs and report the worst
//!   violation of the nodewise ordering.
//!
//! Summaries are printed to stdout as `name = value` lines; `--out` writes
//! the per-node table (CSV) or the full record (JSON). Every float is
//! rendered with 17 significant digits, so identical inputs produce
//! byte-identical artifacts. Exit codes: 0 success, 2 configuration or
//! validation failure, 3 solver or audit failure.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use drbsde::catalog::random_ordered_pair;
use drbsde::compare::{compare_solutions, disabled_side_increments, ORDER_TOL};
use drbsde::games::{
    dynkin_value, price_game_option, saddle_check, verify_hedge, DynkinConfig, GameOptionConfig,
    HEDGE_TOL, MAX_ENUMERATION_STEPS,
};
use drbsde::problem::ProblemConfig;
use drbsde::solver::{residual_report, solve, LatticeSolution, SolverConfig};
use drbsde::transform::solve_via_transform;
use drbsde::{Error, Result};

/// Step counts of the refinement ladder.
const REFINE_STEPS: [usize; 4] = [8, 16, 32, 64];

#[derive(Parser)]
#[command(name = "drbsde", version, about = "Doubly reflected lattice laboratory")]
struct Cli {
    #[command(subcommand)]
    mode: Mode,
}

#[derive(Subcommand)]
enum Mode {
    /// Solve a doubly reflected instance from a JSON configuration.
    Solve(SolveArgs),
    /// Value a Dynkin stopping game and audit its saddle point.
    Dynkin(DynkinArgs),
    /// Price a cancellable game option and audit its hedge.
    #[command(name = "option")]
    GameOption(OptionArgs),
    /// Fuzz seeded ordered instance pairs against the nodewise ordering.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    /// Per-node table as comma-separated values.
    Csv,
    /// Full record (summary plus nodes) as JSON.
    Json,
}

#[derive(Args)]
struct SolveArgs {
    /// Instance configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Artifact path; omitted means summary only.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Override the configured step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Tabulate direct vs transformed root values over N ∈ {8, 16, 32, 64}.
    #[arg(long)]
    refine: bool,
}

#[derive(Args)]
struct DynkinArgs {
    /// Game configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Artifact path; omitted means summary only.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Decision depth of the exhaustive saddle audit.
    #[arg(long, default_value_t = 3)]
    depth: usize,
}

#[derive(Args)]
struct OptionArgs {
    /// Option configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Artifact path; omitted means summary only.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct VerifyArgs {
    /// Base seed; pair `k` uses seed + k.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of ordered pairs to solve.
    #[arg(long, default_value_t = 20)]
    batch: usize,
    /// Artifact path; omitted means summary only.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.mode {
        Mode::Solve(args) => run_solve(&args),
        Mode::Dynkin(args) => run_dynkin(&args),
        Mode::GameOption(args) => run_option(&args),
        Mode::Verify(args) => run_verify(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(classify(&err))
        }
    }
}

/// Exit-code contract: configuration and validation trouble is 2, numerical
/// failure is 3.
fn classify(err: &Error) -> u8 {
    match err {
        Error::Config { .. }
        | Error::InvalidGrid { .. }
        | Error::InvalidProbability { .. }
        | Error::InvalidProblem { .. }
        | Error::ExprParse { .. }
        | Error::ExprSymbol { .. }
        | Error::Arbitrage { .. }
        | Error::PairNotOrdered { .. }
        | Error::NoAdmissibleShift { .. }
        | Error::NoGBound { .. }
        | Error::PathDependentM { .. }
        | Error::BranchDependentIncrement { .. }
        | Error::EnumerationTooLarge { .. } => 2,
        _ => 3,
    }
}

fn read_config(path: &PathBuf) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))
}

fn write_artifact(path: &PathBuf, contents: &str) -> Result<()> {
    fs::write(path, contents)
        .map_err(|e| Error::config(format!("cannot write {}: {e}", path.display())))
}

/// 17-significant-digit decimal rendering used for every float artifact.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn flag(x: f64) -> &'static str {
    if x >= 0.5 {
        "1"
    } else {
        "0"
    }
}

// ────────────────────────────────── solve ─────────────────────────────────

fn run_solve(args: &SolveArgs) -> Result<ExitCode> {
    let config = ProblemConfig::from_json(&read_config(&args.config)?)?;
    if args.refine {
        return run_refine(args, &config);
    }
    let spec = match args.steps {
        Some(steps) => config.build_with_steps(steps)?,
        None => config.build()?,
    };
    let sol = solve(&spec, &SolverConfig::default())?;
    let report = residual_report(&spec, &sol);
    let (ek_plus, ek_minus) = sol.expected_k_totals(&spec);

    println!("steps = {}", spec.grid.steps());
    println!("horizon = {}", num(spec.grid.horizon()));
    println!("y0 = {}", num(sol.root_value()));
    println!("expected_k_plus = {}", num(ek_plus));
    println!("expected_k_minus = {}", num(ek_minus));
    println!("residual_band = {}", num(report.band_violation));
    println!("residual_skorohod_low = {}", num(report.skorohod_low));
    println!("residual_skorohod_up = {}", num(report.skorohod_up));
    println!("residual_singularity = {}", num(report.singularity));
    println!("residual_pathwise = {}", num(report.pathwise));
    println!("residual_terminal = {}", num(report.terminal));
    println!("bisection_nodes = {}", sol.bisection_nodes);

    if let Some(path) = &args.out {
        let artifact = match args.format {
            Format::Csv => solve_csv(&spec, &sol),
            Format::Json => solve_json(&spec, &sol, &report),
        };
        write_artifact(path, &artifact)?;
    }
    if report.within_tolerances() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: residual audit failed");
        Ok(ExitCode::from(3))
    }
}

fn solve_csv(spec: &drbsde::problem::ProblemSpec, sol: &LatticeSolution) -> String {
    let grid = spec.grid;
    let n = grid.steps();
    let mut out = String::from("step,level,t,B,Y,Z,dK_plus,dK_minus\n");
    for step in 0..=n {
        for node in grid.nodes_at(step) {
            let (z, kp, km) = if step < n {
                (
                    num(sol.z.get(node)),
                    num(sol.dk_plus.get(node)),
                    num(sol.dk_minus.get(node)),
                )
            } else {
                (String::new(), String::new(), String::new())
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{z},{kp},{km}",
                step,
                node.level,
                num(grid.time(step)),
                num(node.brownian(&grid)),
                num(sol.y.get(node)),
            );
        }
    }
    out
}

fn solve_json(
    spec: &drbsde::problem::ProblemSpec,
    sol: &LatticeSolution,
    report: &drbsde::solver::ResidualReport,
) -> String {
    let grid = spec.grid;
    let n = grid.steps();
    let (ek_plus, ek_minus) = sol.expected_k_totals(spec);
    let mut out = String::from("{\n");
    let _ = writeln!(out, "  \"mode\": \"solve\",");
    let _ = writeln!(out, "  \"steps\": {n},");
    let _ = writeln!(out, "  \"horizon\": {},", num(grid.horizon()));
    let _ = writeln!(out, "  \"y0\": {},", num(sol.root_value()));
    let _ = writeln!(out, "  \"expected_k_plus\": {},", num(ek_plus));
    let _ = writeln!(out, "  \"expected_k_minus\": {},", num(ek_minus));
    let _ = writeln!(out, "  \"residuals\": {{");
    let _ = writeln!(out, "    \"band\": {},", num(report.band_violation));
    let _ = writeln!(out, "    \"skorohod_low\": {},", num(report.skorohod_low));
    let _ = writeln!(out, "    \"skorohod_up\": {},", num(report.skorohod_up));
    let _ = writeln!(out, "    \"singularity\": {},", num(report.singularity));
    let _ = writeln!(out, "    \"pathwise\": {},", num(report.pathwise));
    let _ = writeln!(out, "    \"terminal\": {}", num(report.terminal));
    let _ = writeln!(out, "  }},");
    let _ = writeln!(out, "  \"nodes\": [");
    let mut first = true;
    for step in 0..=n {
        for node in grid.nodes_at(step) {
            if !first {
                out.push_str(",\n");
            }
            first = false;
            let _ = write!(
                out,
                "    {{\"step\": {}, \"level\": {}, \"y\": {}",
                step,
                node.level,
                num(sol.y.get(node))
            );
            if step < n {
                let _ = write!(
                    out,
                    ", \"z\": {}, \"dk_plus\": {}, \"dk_minus\": {}",
                    num(sol.z.get(node)),
                    num(sol.dk_plus.get(node)),
                    num(sol.dk_minus.get(node))
                );
            }
            out.push('}');
        }
    }
    out.push_str("\n  ]\n}\n");
    out
}

fn run_refine(args: &SolveArgs, config: &ProblemConfig) -> Result<ExitCode> {
    let mut rows: Vec<(usize, f64, f64, f64)> = Vec::new();
    for steps in REFINE_STEPS {
        let spec = config.build_with_steps(steps)?;
        let direct = solve(&spec, &SolverConfig::default())?;
        let (mapped, _) = solve_via_transform(&spec, &SolverConfig::default())?;
        let d = direct.root_value();
        let t = mapped.root_value();
        rows.push((steps, d, t, (d - t).abs()));
    }
    for (i, (steps, d, t, gap)) in rows.iter().enumerate() {
        let mut line = format!(
            "N = {steps}: direct = {}, transformed = {}, route_gap = {}",
            num(*d),
            num(*t),
            num(*gap)
        );
        if i > 0 {
            let _ = write!(
                line,
                ", direct_delta = {}, transformed_delta = {}",
                num((d - rows[i - 1].1).abs()),
                num((t - rows[i - 1].2).abs())
            );
        }
        println!("{line}");
    }
    if let Some(path) = &args.out {
        let artifact = match args.format {
            Format::Csv => {
                let mut out = String::from(
                    "steps,direct,transformed,route_gap,direct_delta,transformed_delta\n",
                );
                for (i, (steps, d, t, gap)) in rows.iter().enumerate() {
                    let (dd, td) = if i > 0 {
                        (num((d - rows[i - 1].1).abs()), num((t - rows[i - 1].2).abs()))
                    } else {
                        (String::new(), String::new())
                    };
                    let _ =
                        writeln!(out, "{steps},{},{},{},{dd},{td}", num(*d), num(*t), num(*gap));
                }
                out
            }
            Format::Json => {
                let mut out = String::from("{\n  \"mode\": \"refine\",\n  \"rows\": [\n");
                for (i, (steps, d, t, gap)) in rows.iter().enumerate() {
                    if i > 0 {
                        out.push_str(",\n");
                    }
                    let _ = write!(
                        out,
                        "    {{\"steps\": {steps}, \"direct\": {}, \"transformed\": {}, \
                         \"route_gap\": {}}}",
                        num(*d),
                        num(*t),
                        num(*gap)
                    );
                }
                out.push_str("\n  ]\n}\n");
                out
            }
        };
        write_artifact(path, &artifact)?;
    }
    Ok(ExitCode::SUCCESS)
}

// ────────────────────────────────── dynkin ────────────────────────────────

fn run_dynkin(args: &DynkinArgs) -> Result<ExitCode> {
    let game = DynkinConfig::from_json(&read_config(&args.config)?)?.build()?;
    let sol = dynkin_value(&game)?;
    let n = game.grid.steps();
    let cancel_nodes: usize = (0..n)
        .flat_map(|s| game.grid.nodes_at(s))
        .filter(|&node| sol.stop_up.get(node) >= 0.5)
        .count();
    let exercise_nodes: usize = (0..n)
        .flat_map(|s| game.grid.nodes_at(s))
        .filter(|&node| sol.stop_low.get(node) >= 0.5)
        .count();

    println!("steps = {n}");
    println!("q = {}", num(game.measure.q()));
    println!("value = {}", num(sol.root_value()));
    println!("cancel_nodes = {cancel_nodes}");
    println!("exercise_nodes = {exercise_nodes}");

    let mut failed = false;
    let saddle = if n <= MAX_ENUMERATION_STEPS && args.depth > 0 {
        let report = saddle_check(&game, args.depth.min(n))?;
        println!("saddle_rules_per_side = {}", report.rules_per_side);
        println!("saddle_sigma_violation = {}", num(report.max_sigma_violation));
        println!("saddle_lambda_violation = {}", num(report.max_lambda_violation));
        println!("saddle_equality_gap = {}", num(report.equality_gap));
        if !report.within_tolerance() {
            eprintln!("error: saddle audit failed");
            failed = true;
        }
        Some(report)
    } else {
        println!("saddle_audit = skipped");
        None
    };

    if let Some(path) = &args.out {
        let artifact = match args.format {
            Format::Csv => {
                let mut out = String::from("step,level,value,stop_up,stop_low\n");
                for step in 0..=n {
                    for node in game.grid.nodes_at(step) {
                        let (su, sl) = if step < n {
                            (flag(sol.stop_up.get(node)), flag(sol.stop_low.get(node)))
                        } else {
                            ("", "")
                        };
                        let _ = writeln!(
                            out,
                            "{},{},{},{su},{sl}",
                            step,
                            node.level,
                            num(sol.value.get(node))
                        );
                    }
                }
                out
            }
            Format::Json => {
                let mut out = String::from("{\n  \"mode\": \"dynkin\",\n");
                let _ = writeln!(out, "  \"steps\": {n},");
                let _ = writeln!(out, "  \"value\": {},", num(sol.root_value()));
                match &saddle {
                    Some(report) => {
                        let _ = writeln!(out, "  \"saddle\": {{");
                        let _ = writeln!(
                            out,
                            "    \"rules_per_side\": {},",
                            report.rules_per_side
                        );
                        let _ = writeln!(
                            out,
                            "    \"sigma_violation\": {},",
                            num(report.max_sigma_violation)
                        );
                        let _ = writeln!(
                            out,
                            "    \"lambda_violation\": {},",
                            num(report.max_lambda_violation)
                        );
                        let _ =
                            writeln!(out, "    \"equality_gap\": {}", num(report.equality_gap));
                        let _ = writeln!(out, "  }},");
                    }
                    None => {
                        let _ = writeln!(out, "  \"saddle\": null,");
                    }
                }
                let _ = writeln!(out, "  \"nodes\": [");
                let mut first = true;
                for step in 0..=n {
                    for node in game.grid.nodes_at(step) {
                        if !first {
                            out.push_str(",\n");
                        }
                        first = false;
                        let _ = write!(
                            out,
                            "    {{\"step\": {}, \"level\": {}, \"value\": {}}}",
                            step,
                            node.level,
                            num(sol.value.get(node))
                        );
                    }
                }
                out.push_str("\n  ]\n}\n");
                out
            }
        };
        write_artifact(path, &artifact)?;
    }
    Ok(if failed { ExitCode::from(3) } else { ExitCode::SUCCESS })
}

// ────────────────────────────────── option ────────────────────────────────

fn run_option(args: &OptionArgs) -> Result<ExitCode> {
    let option = GameOptionConfig::from_json(&read_config(&args.config)?)?.build()?;
    let sol = price_game_option(&option, &SolverConfig::default())?;
    let grid = option.market.grid;
    let n = grid.steps();

    println!("steps = {n}");
    println!("q_star = {}", num(sol.q_star));
    println!("price = {}", num(sol.initial_price()));

    let mut failed = false;
    if n <= MAX_ENUMERATION_STEPS {
        let hedge = verify_hedge(&option, &sol)?;
        println!("hedge_paths = {}", hedge.paths);
        println!("hedge_shortfall = {}", num(hedge.worst_shortfall));
        println!("hedge_match = {}", num(hedge.hedge_match));
        if hedge.worst_shortfall > HEDGE_TOL || hedge.hedge_match > HEDGE_TOL {
            eprintln!("error: hedge audit failed");
            failed = true;
        }
    } else {
        println!("hedge_audit = skipped");
    }

    if let Some(path) = &args.out {
        let artifact = match args.format {
            Format::Csv => {
                let mut out =
                    String::from("step,level,S,V,gamma,beta,stop_cancel,stop_exercise\n");
                for step in 0..=n {
                    for node in grid.nodes_at(step) {
                        let (g, b, sc, se) = if step < n {
                            (
                                num(sol.gamma.get(node)),
                                num(sol.beta.get(node)),
                                flag(sol.stop_cancel.get(node)).to_string(),
                                flag(sol.stop_exercise.get(node)).to_string(),
                            )
                        } else {
                            (String::new(), String::new(), String::new(), String::new())
                        };
                        let _ = writeln!(
                            out,
                            "{},{},{},{},{g},{b},{sc},{se}",
                            step,
                            node.level,
                            num(sol.prices.get(node)),
                            num(sol.values.get(node))
                        );
                    }
                }
                out
            }
            Format::Json => {
                let mut out = String::from("{\n  \"mode\": \"option\",\n");
                let _ = writeln!(out, "  \"steps\": {n},");
                let _ = writeln!(out, "  \"q_star\": {},", num(sol.q_star));
                let _ = writeln!(out, "  \"price\": {},", num(sol.initial_price()));
                let _ = writeln!(out, "  \"nodes\": [");
                let mut first = true;
                for step in 0..=n {
                    for node in grid.nodes_at(step) {
                        if !first {
                            out.push_str(",\n");
                        }
                        first = false;
                        let _ = write!(
                            out,
                            "    {{\"step\": {}, \"level\": {}, \"price\": {}, \"value\": {}",
                            step,
                            node.level,
                            num(sol.prices.get(node)),
                            num(sol.values.get(node))
                        );
                        if step < n {
                            let _ = write!(
                                out,
                                ", \"gamma\": {}, \"beta\": {}",
                                num(sol.gamma.get(node)),
                                num(sol.beta.get(node))
                            );
                        }
                        out.push('}');
                    }
                }
                out.push_str("\n  ]\n}\n");
                out
            }
        };
        write_artifact(path, &artifact)?;
    }
    Ok(if failed { ExitCode::from(3) } else { ExitCode::SUCCESS })
}

// ────────────────────────────────── verify ────────────────────────────────

fn finite_or(x: f64, fallback: &str) -> String {
    if x.is_finite() {
        num(x)
    } else {
        fallback.to_string()
    }
}

fn run_verify(args: &VerifyArgs) -> Result<ExitCode> {
    let config = SolverConfig::default();
    let mut worst_y = f64::NEG_INFINITY;
    let mut worst_driver = f64::NEG_INFINITY;
    let mut worst_kp = f64::NEG_INFINITY;
    let mut worst_km = f64::NEG_INFINITY;
    let mut worst_disabled = 0.0_f64;
    let mut rows = String::from(
        "seed,steps,y_violation,driver_violation,k_plus_violation,k_minus_violation,\
         coinciding_lower,coinciding_upper,disabled_increment\n",
    );
    let mut json_rows: Vec<String> = Vec::new();
    for k in 0..args.batch {
        let seed = args.seed + k as u64;
        let pair = random_ordered_pair(seed);
        let sol1 = solve(&pair.first, &config)?;
        let sol2 = solve(&pair.second, &config)?;
        let report = compare_solutions(&pair, &sol1, &sol2);
        let (kp1, km1) = disabled_side_increments(&pair.first, &sol1);
        let (kp2, km2) = disabled_side_increments(&pair.second, &sol2);
        let disabled = kp1.max(km1).max(kp2).max(km2);
        worst_y = worst_y.max(report.y_violation);
        worst_driver = worst_driver.max(report.driver_violation);
        worst_kp = worst_kp.max(report.k_plus_violation);
        worst_km = worst_km.max(report.k_minus_violation);
        worst_disabled = worst_disabled.max(disabled);
        let _ = writeln!(
            rows,
            "{seed},{},{},{},{},{},{},{},{}",
            pair.first.grid.steps(),
            num(report.y_violation),
            num(report.driver_violation),
            finite_or(report.k_plus_violation, ""),
            finite_or(report.k_minus_violation, ""),
            report.coinciding_lower,
            report.coinciding_upper,
            num(disabled)
        );
        json_rows.push(format!(
            "    {{\"seed\": {seed}, \"steps\": {}, \"y_violation\": {}, \
             \"k_plus_violation\": {}, \"k_minus_violation\": {}, \"disabled_increment\": {}}}",
            pair.first.grid.steps(),
            num(report.y_violation),
            finite_or(report.k_plus_violation, "null"),
            finite_or(report.k_minus_violation, "null"),
            num(disabled)
        ));
    }

    println!("pairs = {}", args.batch);
    println!("max_y_violation = {}", num(worst_y));
    println!("max_driver_violation = {}", num(worst_driver));
    println!("max_k_plus_violation = {}", finite_or(worst_kp, "none"));
    println!("max_k_minus_violation = {}", finite_or(worst_km, "none"));
    println!("max_disabled_increment = {}", num(worst_disabled));
    let pass = worst_y <= ORDER_TOL
        && worst_kp.max(worst_km) <= ORDER_TOL
        && worst_disabled == 0.0;
    println!("verdict = {}", if pass { "pass" } else { "fail" });

    if let Some(path) = &args.out {
        let artifact = match args.format {
            Format::Csv => rows,
            Format::Json => {
                format!(
                    "{{\n  \"mode\": \"verify\",\n  \"pairs\": {},\n  \"max_y_violation\": {},\n  \
                     \"verdict\": \"{}\",\n  \"rows\": [\n{}\n  ]\n}}\n",
                    args.batch,
                    num(worst_y),
                    if pass { "pass" } else { "fail" },
                    json_rows.join(",\n")
                )
            }
        };
        write_artifact(path, &artifact)?;
    }
    if pass {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: ordering audit failed");
        Ok(ExitCode::from(3))
    }
}
