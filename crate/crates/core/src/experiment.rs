//! Declarative parameter sweeps, a fixed CSV output schema, and canned
//! figure recipes.
//!
//! Every table renders to the same column set
//! `sweep,scheme,mean_slots,normalized,method,std_err,trials,seed,best_ns,error`
//! preceded by `# key: value` metadata lines (tool version, the resolved
//! sweep specification as JSON, and the seed; never a timestamp, so a seeded
//! rerun is byte-identical). Rows are ordered grid value, then scheme label,
//! then method. A row that fails to evaluate keeps its grid/label cells and
//! carries the failure text in the `error` column; structural mistakes in the
//! specification itself are rejected before any row is produced.

use serde::{Deserialize, Serialize};

use crate::dist::{
    approx_grabner, approx_improved, approx_lln, max_orderstat_mean_exact, DistError, ErasureProb,
    NegBinomialParams, DEFAULT_REL_TOL,
};
use crate::montecarlo::{simulate, simulate_max_orderstat, SimulationPlan};
use crate::optimize::{crossover_user_grid, default_ns_max, optimize_ns};
use crate::schemes::{
    decode_prob_within_budget, expected_delay, CodeConfig, Method, Scenario, Scheme, SchemeError,
};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_TRIALS: u64 = 100_000;
/// Larger audiences need tighter error bars for the order-statistic figure,
/// since the compared curves converge.
pub const FIG6_LARGE_U_TRIALS: u64 = 1_000_000;

/// Largest float that still round-trips exactly through u64 grids.
const MAX_INTEGER_GRID: f64 = 9.007_199_254_740_992e15; // 2^53

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExperimentError {
    #[error("sweep grid must be nonempty")]
    EmptyGrid,
    #[error("sweep grid values must be finite, got {0}")]
    NonFiniteGrid(f64),
    #[error("sweep grid must be strictly increasing, got {prev} then {next}")]
    NonIncreasingGrid { prev: f64, next: f64 },
    #[error("sweep grid for {var} requires nonnegative integer values, got {value}")]
    NonIntegerGrid { var: &'static str, value: f64 },
    #[error("at least one scheme is required")]
    NoSchemes,
    #[error("scheme {scheme} cannot take part in a {sweep} sweep")]
    IncompatibleSweep { scheme: Scheme, sweep: &'static str },
    #[error("budget sweeps are analytic-only; set mode = \"analytic\"")]
    BudgetNeedsAnalytic,
    #[error("budget sweeps report probabilities; normalize does not apply")]
    BudgetNoNormalize,
    #[error("params.{param} conflicts with sweep = {sweep}")]
    ParamConflictsWithSweep {
        param: &'static str,
        sweep: &'static str,
    },
    #[error("params.{param} is required {needed_for}")]
    MissingParam {
        param: &'static str,
        needed_for: &'static str,
    },
    #[error("optimize_ns conflicts with sweeping the block length itself")]
    OptimizeInNsSweep,
    #[error("params.n_s conflicts with optimize_ns; the search chooses the block length")]
    OptimizeWithFixedBlock,
    #[error("params.ns_max requires optimize_ns = true")]
    NsMaxWithoutOptimize,
    #[error("unknown figure {0:?}; expected fig2 through fig6")]
    UnknownFigure(String),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// Which parameter the grid enumerates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepVariable {
    /// Symbol erasure probability.
    #[serde(rename = "eps_s")]
    EpsS,
    /// Block length of the block-based schemes.
    #[serde(rename = "n_s")]
    NS,
    /// Audience size.
    #[serde(rename = "users")]
    Users,
    /// Slot budget for decode-probability queries.
    #[serde(rename = "budget")]
    Budget,
}

impl std::fmt::Display for SweepVariable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepVariable::EpsS => "eps_s",
            SweepVariable::NS => "n_s",
            SweepVariable::Users => "users",
            SweepVariable::Budget => "budget",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Analytic,
    Simulate,
    Both,
}

impl Mode {
    fn wants_exact(self) -> bool {
        self != Mode::Simulate
    }

    fn wants_simulation(self) -> bool {
        self != Mode::Analytic
    }
}

/// Parameters held fixed across the grid. A field that the sweep itself
/// enumerates must be left unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedParams {
    pub k_s: u64,
    pub k_p: u64,
    #[serde(default)]
    pub n_s: Option<u64>,
    #[serde(default)]
    pub users: Option<u64>,
    #[serde(default)]
    pub eps_s: Option<f64>,
    /// Search the block length per grid point instead of fixing it.
    #[serde(default)]
    pub optimize_ns: bool,
    /// Search ceiling for `optimize_ns`; defaults per scheme.
    #[serde(default)]
    pub ns_max: Option<u64>,
}

/// A complete sweep description, loadable from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub sweep: SweepVariable,
    pub grid: Vec<f64>,
    pub schemes: Vec<Scheme>,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub normalize: bool,
    pub params: FixedParams,
}

fn default_mode() -> Mode {
    Mode::Analytic
}

fn default_trials() -> u64 {
    DEFAULT_TRIALS
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

/// One output row. Unset cells render as empty CSV fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub sweep: f64,
    pub scheme: String,
    pub mean_slots: Option<f64>,
    pub normalized: Option<f64>,
    pub method: Option<Method>,
    pub std_err: Option<f64>,
    pub trials: Option<u64>,
    pub seed: Option<u64>,
    pub best_ns: Option<u64>,
    pub error: Option<String>,
}

impl Row {
    fn blank(sweep: f64, scheme: impl Into<String>) -> Self {
        Self {
            sweep,
            scheme: scheme.into(),
            mean_slots: None,
            normalized: None,
            method: None,
            std_err: None,
            trials: None,
            seed: None,
            best_ns: None,
            error: None,
        }
    }

    fn failed(sweep: f64, scheme: impl Into<String>, err: impl std::fmt::Display) -> Self {
        let mut row = Self::blank(sweep, scheme);
        row.error = Some(err.to_string());
        row
    }
}

/// Rows plus the `# key: value` lines that precede the header.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub metadata: Vec<(String, String)>,
    pub rows: Vec<Row>,
}

pub const CSV_HEADER: &str =
    "sweep,scheme,mean_slots,normalized,method,std_err,trials,seed,best_ns,error";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt_cell<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

impl ResultTable {
    /// Renders the full document: metadata comments, header, one line per
    /// row, each line `\n`-terminated. Floats use Rust's shortest exact
    /// round-trip formatting, so equal tables render to equal bytes.
    pub fn render_csv(&self) -> String {
        let mut out = String::new();
        for (key, value) in &self.metadata {
            out.push_str("# ");
            out.push_str(key);
            out.push_str(": ");
            out.push_str(value);
            out.push('\n');
        }
        out.push_str(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            let cells = [
                row.sweep.to_string(),
                csv_field(&row.scheme),
                opt_cell(&row.mean_slots),
                opt_cell(&row.normalized),
                opt_cell(&row.method),
                opt_cell(&row.std_err),
                opt_cell(&row.trials),
                opt_cell(&row.seed),
                opt_cell(&row.best_ns),
                row.error.as_deref().map(csv_field).unwrap_or_default(),
            ];
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

fn tool_line() -> (String, String) {
    (
        "tool".to_string(),
        format!("arqcast {}", env!("CARGO_PKG_VERSION")),
    )
}

fn require_integer_grid(grid: &[f64], var: &'static str) -> Result<(), ExperimentError> {
    for &v in grid {
        if v.fract() != 0.0 || v < 0.0 || v > MAX_INTEGER_GRID {
            return Err(ExperimentError::NonIntegerGrid { var, value: v });
        }
    }
    Ok(())
}

/// Validates and normalizes a spec: schemes are sorted by name and deduped,
/// cross-field conflicts are rejected, and range errors in fixed parameters
/// surface immediately instead of per row.
fn resolve(spec: &ExperimentSpec) -> Result<ExperimentSpec, ExperimentError> {
    let mut spec = spec.clone();
    spec.schemes.sort_by_key(|s| s.to_string());
    spec.schemes.dedup();
    if spec.schemes.is_empty() {
        return Err(ExperimentError::NoSchemes);
    }
    if spec.grid.is_empty() {
        return Err(ExperimentError::EmptyGrid);
    }
    for &v in &spec.grid {
        if !v.is_finite() {
            return Err(ExperimentError::NonFiniteGrid(v));
        }
    }
    for w in spec.grid.windows(2) {
        if w[1] <= w[0] {
            return Err(ExperimentError::NonIncreasingGrid {
                prev: w[0],
                next: w[1],
            });
        }
    }
    let p = &spec.params;
    // The code dimensions must be structurally valid regardless of the sweep.
    CodeConfig::new(p.k_s, p.k_p, None)?;
    let has_block_scheme = spec
        .schemes
        .iter()
        .any(|s| matches!(s, Scheme::Fr | Scheme::Fir));
    let needs_fixed_eps = spec.sweep != SweepVariable::EpsS;

    match spec.sweep {
        SweepVariable::EpsS => {
            if p.eps_s.is_some() {
                return Err(ExperimentError::ParamConflictsWithSweep {
                    param: "eps_s",
                    sweep: "eps_s",
                });
            }
            for &v in &spec.grid {
                ErasureProb::new(v)?;
            }
        }
        SweepVariable::NS => {
            require_integer_grid(&spec.grid, "n_s")?;
            if p.n_s.is_some() {
                return Err(ExperimentError::ParamConflictsWithSweep {
                    param: "n_s",
                    sweep: "n_s",
                });
            }
            if p.optimize_ns {
                return Err(ExperimentError::OptimizeInNsSweep);
            }
        }
        SweepVariable::Users => {
            require_integer_grid(&spec.grid, "users")?;
            if p.users.is_some() {
                return Err(ExperimentError::ParamConflictsWithSweep {
                    param: "users",
                    sweep: "users",
                });
            }
            if spec.schemes.contains(&Scheme::Fir) {
                return Err(ExperimentError::IncompatibleSweep {
                    scheme: Scheme::Fir,
                    sweep: "users",
                });
            }
        }
        SweepVariable::Budget => {
            require_integer_grid(&spec.grid, "budget")?;
            if spec.mode != Mode::Analytic {
                return Err(ExperimentError::BudgetNeedsAnalytic);
            }
            if spec.normalize {
                return Err(ExperimentError::BudgetNoNormalize);
            }
            if spec.schemes.contains(&Scheme::Fir) {
                return Err(ExperimentError::IncompatibleSweep {
                    scheme: Scheme::Fir,
                    sweep: "budget",
                });
            }
            if p.optimize_ns {
                return Err(ExperimentError::ParamConflictsWithSweep {
                    param: "optimize_ns",
                    sweep: "budget",
                });
            }
        }
    }

    if needs_fixed_eps {
        match p.eps_s {
            Some(e) => {
                ErasureProb::new(e)?;
            }
            None => {
                return Err(ExperimentError::MissingParam {
                    param: "eps_s",
                    needed_for: "when the sweep varies another parameter",
                })
            }
        }
    }
    if p.optimize_ns && p.n_s.is_some() {
        return Err(ExperimentError::OptimizeWithFixedBlock);
    }
    if p.ns_max.is_some() && !p.optimize_ns {
        return Err(ExperimentError::NsMaxWithoutOptimize);
    }
    if has_block_scheme
        && spec.sweep != SweepVariable::NS
        && !p.optimize_ns
        && p.n_s.is_none()
    {
        return Err(ExperimentError::MissingParam {
            param: "n_s",
            needed_for: "for block-based schemes (or set optimize_ns)",
        });
    }
    if spec.sweep != SweepVariable::Users {
        let users = p.users.unwrap_or(1);
        if users < 1 {
            return Err(SchemeError::NoUsers.into());
        }
        if users != 1 && spec.schemes.contains(&Scheme::Fir) {
            return Err(SchemeError::FirMulticast { users }.into());
        }
    }
    if spec.mode.wants_simulation() && spec.trials < 1 {
        return Err(SchemeError::NoTrials.into());
    }
    Ok(spec)
}

/// Evaluates one validated (grid value, scheme) cell into its rows.
fn point_rows(spec: &ExperimentSpec, value: f64, scheme: Scheme) -> Vec<Row> {
    let label = scheme.to_string();
    let p = &spec.params;
    let eps = match spec.sweep {
        SweepVariable::EpsS => value,
        _ => p.eps_s.expect("validated"),
    };
    let channel = match ErasureProb::new(eps) {
        Ok(c) => c,
        Err(e) => return vec![Row::failed(value, label, e)],
    };
    let users = match spec.sweep {
        SweepVariable::Users => value as u64,
        _ => p.users.unwrap_or(1),
    };

    // Resolve the block length: swept, searched, or fixed.
    let (n_s, best_ns) = match scheme {
        Scheme::Iir => (None, None),
        Scheme::Fr | Scheme::Fir => match spec.sweep {
            SweepVariable::NS => (Some(value as u64), None),
            _ if p.optimize_ns => {
                let ns_max = p
                    .ns_max
                    .or_else(|| default_ns_max(scheme, p.k_s))
                    .expect("block scheme has a default ceiling");
                match optimize_ns(scheme, p.k_s, p.k_p, channel, users, ns_max) {
                    Ok(r) => (Some(r.best_ns), Some(r.best_ns)),
                    Err(e) => return vec![Row::failed(value, label, e)],
                }
            }
            _ => (p.n_s, None),
        },
    };

    let scenario = match CodeConfig::new(p.k_s, p.k_p, n_s)
        .and_then(|code| Scenario::new(code, channel, users, scheme))
    {
        Ok(s) => s,
        Err(e) => return vec![Row::failed(value, label, e)],
    };

    if spec.sweep == SweepVariable::Budget {
        let mut row = Row::blank(value, label);
        match decode_prob_within_budget(&scenario, value as u64) {
            Ok(d) => {
                row.mean_slots = Some(d.per_user);
                row.normalized = Some(d.expected_users);
                row.method = Some(Method::Analytic);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        return vec![row];
    }

    let mut rows = Vec::new();
    if spec.mode.wants_exact() {
        rows.push(match expected_delay(&scenario) {
            Ok(d) => {
                let mut row = Row::blank(value, label.clone());
                row.mean_slots = Some(d.mean_slots);
                row.normalized = if spec.normalize { d.normalized } else { None };
                row.method = Some(d.method);
                row.best_ns = best_ns;
                row
            }
            Err(e) => Row::failed(value, label.clone(), e),
        });
    }
    if spec.mode.wants_simulation() {
        let sim = SimulationPlan::new(scenario, spec.trials, spec.seed).and_then(|plan| {
            let r = simulate(&plan)?;
            Ok((plan, r))
        });
        rows.push(match sim {
            Ok((plan, r)) => {
                let mut row = Row::blank(value, label);
                row.mean_slots = Some(r.mean_slots);
                row.normalized = spec
                    .normalize
                    .then(|| r.mean_slots / scenario.code().data_symbols());
                row.method = Some(Method::MonteCarlo);
                row.std_err = Some(r.std_err);
                row.trials = Some(plan.trials());
                row.seed = Some(plan.seed());
                row.best_ns = best_ns;
                row
            }
            Err(e) => Row::failed(value, label, e),
        });
    }
    rows
}

/// Runs a validated sweep. Evaluation failures at individual grid points are
/// reported in each row's `error` column; only specification-level problems
/// return `Err`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ResultTable, ExperimentError> {
    let spec = resolve(spec)?;
    let mut metadata = vec![
        tool_line(),
        (
            "spec".to_string(),
            serde_json::to_string(&spec).expect("spec serializes"),
        ),
    ];
    if spec.sweep == SweepVariable::Budget {
        metadata.push((
            "metric".to_string(),
            "decode probability (mean_slots = per-user probability, \
             normalized = expected decoded users)"
                .to_string(),
        ));
    }
    metadata.push(("seed".to_string(), spec.seed.to_string()));
    let mut rows = Vec::new();
    for &value in &spec.grid {
        for &scheme in &spec.schemes {
            rows.extend(point_rows(&spec, value, scheme));
        }
    }
    Ok(ResultTable { metadata, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureId {
    Fig2,
    Fig3,
    Fig4,
    Fig5,
    Fig6,
}

impl std::fmt::Display for FigureId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FigureId::Fig2 => "fig2",
            FigureId::Fig3 => "fig3",
            FigureId::Fig4 => "fig4",
            FigureId::Fig5 => "fig5",
            FigureId::Fig6 => "fig6",
        })
    }
}

impl std::str::FromStr for FigureId {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().trim_start_matches("fig") {
            "2" => Ok(FigureId::Fig2),
            "3" => Ok(FigureId::Fig3),
            "4" => Ok(FigureId::Fig4),
            "5" => Ok(FigureId::Fig5),
            "6" => Ok(FigureId::Fig6),
            _ => Err(ExperimentError::UnknownFigure(s.to_string())),
        }
    }
}

/// Knobs shared by all figure recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FigureOptions {
    pub seed: u64,
    /// Overrides every per-recipe trial count when set.
    pub trials: Option<u64>,
}

impl Default for FigureOptions {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            trials: None,
        }
    }
}

/// Reproduces one of the five canned result tables. The recipes are fixed;
/// only the seed and trial volume can be adjusted.
pub fn reproduce_figure(
    id: FigureId,
    opts: FigureOptions,
) -> Result<ResultTable, ExperimentError> {
    let mut table = match id {
        FigureId::Fig2 => run_experiment(&ExperimentSpec {
            sweep: SweepVariable::EpsS,
            grid: (1..=10).map(|i| i as f64 / 20.0).collect(),
            schemes: vec![Scheme::Fr, Scheme::Iir],
            mode: Mode::Analytic,
            trials: opts.trials.unwrap_or(DEFAULT_TRIALS),
            seed: opts.seed,
            normalize: true,
            params: FixedParams {
                k_s: 100,
                k_p: 100,
                n_s: None,
                users: None,
                eps_s: None,
                optimize_ns: true,
                ns_max: Some(300),
            },
        })?,
        FigureId::Fig3 => run_experiment(&ExperimentSpec {
            sweep: SweepVariable::NS,
            grid: (100..=500).map(|n| n as f64).collect(),
            schemes: vec![Scheme::Fir, Scheme::Fr, Scheme::Iir],
            mode: Mode::Analytic,
            trials: opts.trials.unwrap_or(DEFAULT_TRIALS),
            seed: opts.seed,
            normalize: true,
            params: FixedParams {
                k_s: 100,
                k_p: 100,
                n_s: None,
                users: None,
                eps_s: Some(0.1),
                optimize_ns: false,
                ns_max: None,
            },
        })?,
        FigureId::Fig4 => multicast_comparison_table(100, 100, 300, 1000, opts.seed)?,
        FigureId::Fig5 => multicast_comparison_table(1000, 100, 3000, 1000, opts.seed)?,
        FigureId::Fig6 => {
            orderstat_comparison_table(&[10, 20, 50, 100, 200, 500, 1000], opts)?
        }
    };
    table
        .metadata
        .insert(0, ("figure".to_string(), id.to_string()));
    Ok(table)
}

const MULTICAST_EPS_GRID: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// Expected delay versus audience size: per-user-count optimized fixed
/// redundancy against the rateless scheme, one curve pair per erasure
/// probability. Labels carry the erasure probability ("fr eps=0.3").
fn multicast_comparison_table(
    k_s: u64,
    k_p: u64,
    ns_max: u64,
    users_max: u64,
    seed: u64,
) -> Result<ResultTable, ExperimentError> {
    multicast_comparison_rows(k_s, k_p, ns_max, users_max, &MULTICAST_EPS_GRID, seed)
}

fn multicast_comparison_rows(
    k_s: u64,
    k_p: u64,
    ns_max: u64,
    users_max: u64,
    eps_grid: &[f64],
    seed: u64,
) -> Result<ResultTable, ExperimentError> {
    let metadata = vec![
        tool_line(),
        (
            "params".to_string(),
            serde_json::json!({
                "k_s": k_s,
                "k_p": k_p,
                "ns_max": ns_max,
                "users_max": users_max,
                "eps_grid": eps_grid,
                "fr": "block length optimized per point",
            })
            .to_string(),
        ),
        ("seed".to_string(), seed.to_string()),
    ];
    let mut rows = Vec::new();
    for &users in &crossover_user_grid(users_max) {
        let value = users as f64;
        // Scheme labels sort "fr ..." before "iir ...".
        for &eps in eps_grid {
            let label = format!("fr eps={eps}");
            let channel = ErasureProb::new(eps)?;
            rows.push(
                match optimize_ns(Scheme::Fr, k_s, k_p, channel, users, ns_max) {
                    Ok(r) => {
                        let mut row = Row::blank(value, label);
                        row.mean_slots = Some(r.best_delay.mean_slots);
                        row.normalized = r.best_delay.normalized;
                        row.method = Some(r.best_delay.method);
                        row.best_ns = Some(r.best_ns);
                        row
                    }
                    Err(e) => Row::failed(value, label, e),
                },
            );
        }
        for &eps in eps_grid {
            let label = format!("iir eps={eps}");
            let channel = ErasureProb::new(eps)?;
            let delay = CodeConfig::new(k_s, k_p, None)
                .and_then(|code| Scenario::new(code, channel, users, Scheme::Iir))
                .and_then(|sc| expected_delay(&sc));
            rows.push(match delay {
                Ok(d) => {
                    let mut row = Row::blank(value, label);
                    row.mean_slots = Some(d.mean_slots);
                    row.normalized = d.normalized;
                    row.method = Some(d.method);
                    row
                }
                Err(e) => Row::failed(value, label, e),
            });
        }
    }
    Ok(ResultTable { metadata, rows })
}

const ORDERSTAT_KS: [u64; 3] = [1, 2, 4];
const ORDERSTAT_P: f64 = 0.9;

/// Expected maximum of `u` negative binomial draws: the exact tail sum, its
/// three analytic approximations, and a seeded simulation, per `k`. Labels
/// sort exact < grabner < improved < lln < sim.
fn orderstat_comparison_table(
    u_grid: &[u64],
    opts: FigureOptions,
) -> Result<ResultTable, ExperimentError> {
    let eps = ErasureProb::new(1.0 - ORDERSTAT_P)?;
    let trials_for = |u: u64| {
        opts.trials.unwrap_or(if u >= 100 {
            FIG6_LARGE_U_TRIALS
        } else {
            DEFAULT_TRIALS
        })
    };
    let metadata = vec![
        tool_line(),
        (
            "params".to_string(),
            serde_json::json!({
                "p": ORDERSTAT_P,
                "k": ORDERSTAT_KS,
                "users": u_grid,
                "metric": "expected maximum of users independent NB(k, p) draws",
            })
            .to_string(),
        ),
        ("seed".to_string(), opts.seed.to_string()),
    ];
    let mut rows = Vec::new();
    for &u in u_grid {
        let value = u as f64;
        for k in ORDERSTAT_KS {
            let label = format!("exact k={k}");
            let params = NegBinomialParams::new(k, ORDERSTAT_P)?;
            rows.push(
                match max_orderstat_mean_exact(&params, u, DEFAULT_REL_TOL) {
                    Ok(m) => {
                        let mut row = Row::blank(value, label);
                        row.mean_slots = Some(m);
                        row.method = Some(Method::ExactSum);
                        row
                    }
                    Err(e) => Row::failed(value, label, e),
                },
            );
        }
        fn lln(k: u64, eps: ErasureProb, _u: u64) -> Result<f64, DistError> {
            Ok(approx_lln(k, eps))
        }
        for (name, f) in [
            ("grabner", approx_grabner as fn(u64, ErasureProb, u64) -> Result<f64, DistError>),
            ("improved", approx_improved),
            ("lln", lln),
        ] {
            for k in ORDERSTAT_KS {
                let label = format!("{name} k={k}");
                rows.push(match f(k, eps, u) {
                    Ok(m) => {
                        let mut row = Row::blank(value, label);
                        row.mean_slots = Some(m);
                        row.method = Some(Method::Analytic);
                        row
                    }
                    Err(e) => Row::failed(value, label, e),
                });
            }
        }
        for k in ORDERSTAT_KS {
            let label = format!("sim k={k}");
            let params = NegBinomialParams::new(k, ORDERSTAT_P)?;
            let trials = trials_for(u);
            rows.push(
                match simulate_max_orderstat(&params, u, trials, opts.seed) {
                    Ok(r) => {
                        let mut row = Row::blank(value, label);
                        row.mean_slots = Some(r.mean_slots);
                        row.method = Some(Method::MonteCarlo);
                        row.std_err = Some(r.std_err);
                        row.trials = Some(trials);
                        row.seed = Some(opts.seed);
                        row
                    }
                    Err(e) => Row::failed(value, label, e),
                },
            );
        }
    }
    Ok(ResultTable { metadata, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const FROZEN: f64 = 1e-9;

    fn base_spec() -> ExperimentSpec {
        ExperimentSpec {
            sweep: SweepVariable::EpsS,
            grid: vec![0.1, 0.2],
            schemes: vec![Scheme::Iir],
            mode: Mode::Analytic,
            trials: DEFAULT_TRIALS,
            seed: DEFAULT_SEED,
            normalize: false,
            params: FixedParams {
                k_s: 10,
                k_p: 10,
                n_s: None,
                users: None,
                eps_s: None,
                optimize_ns: false,
                ns_max: None,
            },
        }
    }

    #[test]
    fn validation_rejects_structural_mistakes() {
        let mut s = base_spec();
        s.grid.clear();
        assert!(matches!(run_experiment(&s), Err(ExperimentError::EmptyGrid)));

        let mut s = base_spec();
        s.grid = vec![0.2, 0.1];
        assert!(matches!(
            run_experiment(&s),
            Err(ExperimentError::NonIncreasingGrid { .. })
        ));

        let mut s = base_spec();
        s.grid = vec![0.1, f64::NAN];
        assert!(matches!(
            run_experiment(&s),
            Err(ExperimentError::NonFiniteGrid(_))
        ));

        let mut s = base_spec();
        s.schemes.clear();
        assert!(matches!(run_experiment(&s), Err(ExperimentError::NoSchemes)));

        let mut s = base_spec();
        s.params.eps_s = Some(0.3);
        assert!(matches!(
            run_experiment(&s),
            Err(ExperimentError::ParamConflictsWithSweep { param: "eps_s", .. })
        ));

        // Erasure probabilities outside [0, 1) are caught up front.
        let mut s = base_spec();
        s.grid = vec![0.5, 1.0];
        assert!(matches!(run_experiment(&s), Err(ExperimentError::Dist(_))));

        let mut s = base_spec();
        s.sweep = SweepVariable::NS;
        s.grid = vec![10.0, 12.5];
        s.params.eps_s = Some(0.1);
        assert!(matches!(
            run_experiment(&s),
            Err(ExperimentError::NonIntegerGrid { var: "n_s", .. })
        ));

        let mut s = base_spec();
        s.sweep = SweepVariable::NS;
        s.grid = vec![10.0, 12.0];
        s.params.eps_s = Some(0.1);
        s.params.optimize_ns = true;
        assert!(matches!(
            run_experiment(&s),
            Err(ExperimentError::OptimizeInNsSweep)
        ));

        let mut s = base_spec();
        s.sweep = SweepVariable::Users;
        s.grid = vec![1.0, 2.0];
        s.schemes = vec![Scheme::Fir];
        s.params.eps_s = Some(0.1);
        s.params.n_s = Some(12);
        assert!(matches!(
            run_experiment(&s),
            Err(ExperimentError::IncompatibleSweep {
                scheme: Scheme::Fir,
                sweep: "users"
            })
        ));

        // Fixed multicast audience with the point-to-point-only scheme.
        let mut s = base_spec();
        s.schemes = vec![Scheme::Fir];
        s.params.n_s = Some(12);
        s.params.users = Some(3);
        assert!(matches!(
            run_experiment(&s),
            Err(ExperimentError::Scheme(SchemeError::FirMulticast { users: 3 }))
        ));

        let mut s = base_spec();
        s.schemes = vec![Scheme::Fr];
        assert!(matches!(
            run_experiment(&s),
            Err(ExperimentError::MissingParam { param: "n_s", .. })
        ));

        let mut s = base_spec();
        s.params.ns_max = Some(30);
        assert!(matches!(
            run_experiment(&s),
            Err(ExperimentError::NsMaxWithoutOptimize)
        ));

        let mut s = base_spec();
        s.schemes = vec![Scheme::Fr];
        s.params.optimize_ns = true;
        s.params.n_s = Some(12);
        assert!(matches!(
            run_experiment(&s),
            Err(ExperimentError::OptimizeWithFixedBlock)
        ));

        let mut s = base_spec();
        s.mode = Mode::Both;
        s.trials = 0;
        assert!(matches!(
            run_experiment(&s),
            Err(ExperimentError::Scheme(SchemeError::NoTrials))
        ));
    }

    #[test]
    fn validation_rejects_budget_misuse() {
        let budget_spec = || {
            let mut s = base_spec();
            s.sweep = SweepVariable::Budget;
            s.grid = vec![100.0, 200.0];
            s.params.eps_s = Some(0.1);
            s
        };
        let mut s = budget_spec();
        s.mode = Mode::Both;
        assert!(matches!(
            run_experiment(&s),
            Err(ExperimentError::BudgetNeedsAnalytic)
        ));
        let mut s = budget_spec();
        s.normalize = true;
        assert!(matches!(
            run_experiment(&s),
            Err(ExperimentError::BudgetNoNormalize)
        ));
        let mut s = budget_spec();
        s.schemes = vec![Scheme::Fir];
        s.params.n_s = Some(12);
        assert!(matches!(
            run_experiment(&s),
            Err(ExperimentError::IncompatibleSweep {
                scheme: Scheme::Fir,
                sweep: "budget"
            })
        ));
    }

    #[test]
    fn budget_sweep_rows() {
        // NB(1, 0.5): P(T <= b) = 1 - 0.5^b.
        let mut s = base_spec();
        s.sweep = SweepVariable::Budget;
        s.grid = vec![1.0, 2.0, 3.0];
        s.schemes = vec![Scheme::Iir];
        s.params.k_s = 1;
        s.params.k_p = 1;
        s.params.eps_s = Some(0.5);
        s.params.users = Some(4);
        let t = run_experiment(&s).unwrap();
        assert!(t
            .metadata
            .iter()
            .any(|(k, v)| k == "metric" && v.contains("decode probability")));
        assert_eq!(t.rows.len(), 3);
        let expected = [0.5, 0.75, 0.875];
        for (row, want) in t.rows.iter().zip(expected) {
            assert_relative_eq!(row.mean_slots.unwrap(), want, max_relative = 1e-12);
            assert_relative_eq!(
                row.normalized.unwrap(),
                4.0 * want,
                max_relative = 1e-12
            );
            assert_eq!(row.method, Some(Method::Analytic));
            assert_eq!(row.std_err, None);
            assert_eq!(row.error, None);
        }
    }

    #[test]
    fn sweep_rows_are_ordered_and_labeled() {
        let mut s = base_spec();
        s.schemes = vec![Scheme::Iir, Scheme::Fr, Scheme::Fr];
        s.params.n_s = Some(12);
        let t = run_experiment(&s).unwrap();
        // Duplicate scheme deduped; fr sorts before iir within a grid point.
        let labels: Vec<(f64, &str)> = t
            .rows
            .iter()
            .map(|r| (r.sweep, r.scheme.as_str()))
            .collect();
        assert_eq!(
            labels,
            vec![(0.1, "fr"), (0.1, "iir"), (0.2, "fr"), (0.2, "iir")]
        );
    }

    #[test]
    fn per_row_errors_do_not_abort_the_sweep() {
        // A rate-1 block on a 90% erasure channel: success 0.1^400 underflows
        // past the feasibility guard, so the fr row carries an error while
        // the iir row at the same grid point still evaluates.
        let mut s = base_spec();
        s.grid = vec![0.1, 0.9];
        s.schemes = vec![Scheme::Fr, Scheme::Iir];
        s.params.k_s = 400;
        s.params.k_p = 1;
        s.params.n_s = Some(400);
        let t = run_experiment(&s).unwrap();
        assert_eq!(t.rows.len(), 4);
        let ok = &t.rows[0];
        assert_eq!(ok.scheme, "fr");
        assert!(ok.error.is_none(), "fr at eps 0.1 is merely slow, not infeasible");
        let bad = &t.rows[2];
        assert_eq!(bad.scheme, "fr");
        assert!(bad.error.is_some());
        assert_eq!(bad.mean_slots, None);
        let good = &t.rows[3];
        assert_eq!(good.scheme, "iir");
        assert!(good.error.is_none());
        assert_relative_eq!(
            good.mean_slots.unwrap(),
            400.0 / 0.1,
            max_relative = 1e-12
        );
    }

    #[test]
    fn both_mode_emits_exact_then_simulated() {
        let mut s = base_spec();
        s.sweep = SweepVariable::Users;
        s.grid = vec![1.0, 2.0];
        s.mode = Mode::Both;
        s.trials = 500;
        s.normalize = true;
        s.params.eps_s = Some(0.2);
        let t = run_experiment(&s).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.rows[0].method, Some(Method::Analytic));
        assert_eq!(t.rows[1].method, Some(Method::MonteCarlo));
        assert_eq!(t.rows[2].method, Some(Method::ExactSum));
        assert_eq!(t.rows[3].method, Some(Method::MonteCarlo));
        let sim = &t.rows[1];
        assert_eq!(sim.trials, Some(500));
        assert_eq!(sim.seed, Some(DEFAULT_SEED));
        assert!(sim.std_err.is_some());
        assert_relative_eq!(
            sim.normalized.unwrap(),
            sim.mean_slots.unwrap() / 100.0,
            max_relative = 1e-15
        );
        // Simulation agrees with the exact value within a generous band.
        let exact = t.rows[0].mean_slots.unwrap();
        assert!((sim.mean_slots.unwrap() - exact).abs() < 6.0 * sim.std_err.unwrap());
    }

    #[test]
    fn csv_rendering_is_stable_and_escaped() {
        let table = ResultTable {
            metadata: vec![("tool".into(), "arqcast 0.0.0".into())],
            rows: vec![
                {
                    let mut r = Row::blank(0.5, "iir");
                    r.mean_slots = Some(2.0);
                    r.method = Some(Method::Analytic);
                    r
                },
                Row::failed(0.5, "fr", "bad, \"quoted\" thing"),
            ],
        };
        let csv = table.render_csv();
        let expect = "# tool: arqcast 0.0.0\n\
                      sweep,scheme,mean_slots,normalized,method,std_err,trials,seed,best_ns,error\n\
                      0.5,iir,2,,analytic,,,,,\n\
                      0.5,fr,,,,,,,,\"bad, \"\"quoted\"\" thing\"\n";
        assert_eq!(csv, expect);
        assert_eq!(csv, table.render_csv());
    }

    #[test]
    fn rerunning_a_seeded_sweep_is_byte_identical() {
        let mut s = base_spec();
        s.mode = Mode::Both;
        s.trials = 300;
        let a = run_experiment(&s).unwrap().render_csv();
        let b = run_experiment(&s).unwrap().render_csv();
        assert_eq!(a, b);
        s.seed = 43;
        let c = run_experiment(&s).unwrap().render_csv();
        assert_ne!(a, c);
    }

    #[test]
    fn spec_deserializes_with_defaults() {
        let spec: ExperimentSpec = serde_json::from_str(
            r#"{
                "sweep": "eps_s",
                "grid": [0.1, 0.2],
                "schemes": ["iir"],
                "params": {"k_s": 5, "k_p": 5}
            }"#,
        )
        .unwrap();
        assert_eq!(spec.mode, Mode::Analytic);
        assert_eq!(spec.trials, DEFAULT_TRIALS);
        assert_eq!(spec.seed, DEFAULT_SEED);
        assert!(!spec.normalize);
        assert!(run_experiment(&spec).is_ok());
        // Unknown keys are typos, not extensions.
        assert!(serde_json::from_str::<ExperimentSpec>(
            r#"{"sweep": "eps_s", "grid": [0.1], "schemes": ["iir"],
                "params": {"k_s": 5, "k_p": 5}, "trails": 7}"#
        )
        .is_err());
    }

    #[test]
    fn figure_ids_parse() {
        assert_eq!("fig2".parse::<FigureId>().unwrap(), FigureId::Fig2);
        assert_eq!("6".parse::<FigureId>().unwrap(), FigureId::Fig6);
        assert!("fig7".parse::<FigureId>().is_err());
    }

    #[test]
    fn figure2_optimized_tradeoff_curve() {
        let t = reproduce_figure(FigureId::Fig2, FigureOptions::default()).unwrap();
        assert_eq!(t.metadata[0], ("figure".to_string(), "fig2".to_string()));
        assert_eq!(t.rows.len(), 20);
        // Grid point 0.1 is the second: rows 2 (fr) and 3 (iir).
        let fr = &t.rows[2];
        assert_eq!(fr.scheme, "fr");
        assert_eq!(fr.sweep, 0.1);
        assert_eq!(fr.best_ns, Some(119));
        assert_relative_eq!(
            fr.mean_slots.unwrap(),
            12074.629432921576,
            max_relative = FROZEN
        );
        assert_relative_eq!(
            fr.normalized.unwrap(),
            fr.mean_slots.unwrap() / 10_000.0,
            max_relative = 1e-15
        );
        let iir = &t.rows[3];
        assert_eq!(iir.scheme, "iir");
        assert_relative_eq!(
            iir.mean_slots.unwrap(),
            10_000.0 / 0.9,
            max_relative = 1e-12
        );
        assert_eq!(iir.best_ns, None);
        // Both curves rise with the erasure probability.
        for pair in t.rows.chunks(2).collect::<Vec<_>>().windows(2) {
            assert!(pair[1][0].mean_slots.unwrap() > pair[0][0].mean_slots.unwrap());
            assert!(pair[1][1].mean_slots.unwrap() > pair[0][1].mean_slots.unwrap());
        }
    }

    #[test]
    fn figure3_block_length_profiles() {
        let t = reproduce_figure(FigureId::Fig3, FigureOptions::default()).unwrap();
        assert_eq!(t.rows.len(), 401 * 3);
        // Per grid point: fir, fr, iir.
        assert_eq!(t.rows[0].scheme, "fir");
        assert_eq!(t.rows[1].scheme, "fr");
        assert_eq!(t.rows[2].scheme, "iir");
        // At n_s = k_s the capped scheme degenerates to fixed redundancy,
        // bit for bit.
        assert_eq!(t.rows[0].mean_slots, t.rows[1].mean_slots);
        // The iir reference is flat across the sweep.
        let iir0 = t.rows[2].mean_slots.unwrap();
        assert!(t
            .rows
            .iter()
            .filter(|r| r.scheme == "iir")
            .all(|r| r.mean_slots.unwrap() == iir0));
        assert_relative_eq!(iir0, 10_000.0 / 0.9, max_relative = 1e-12);
        // Fixed redundancy dips at n_s = 119 and grows afterwards; the
        // capped scheme decreases toward the rateless limit.
        let fr_at = |ns: f64| {
            t.rows
                .iter()
                .find(|r| r.sweep == ns && r.scheme == "fr")
                .unwrap()
                .mean_slots
                .unwrap()
        };
        assert_relative_eq!(fr_at(119.0), 12074.629432921576, max_relative = FROZEN);
        assert!(fr_at(118.0) > fr_at(119.0) && fr_at(120.0) > fr_at(119.0));
        let fir: Vec<f64> = t
            .rows
            .iter()
            .filter(|r| r.scheme == "fir")
            .map(|r| r.mean_slots.unwrap())
            .collect();
        for w in fir.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + FROZEN));
        }
        assert_relative_eq!(fir[400], 10_000.0 / 0.9, max_relative = FROZEN);
    }

    #[test]
    fn multicast_comparison_small_slice() {
        // One erasure probability, two audience sizes: checks labels, row
        // order, the frozen point-to-point values, and growth in u.
        let t = multicast_comparison_rows(100, 100, 300, 2, &[0.1], DEFAULT_SEED).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.rows[0].scheme, "fr eps=0.1");
        assert_eq!(t.rows[1].scheme, "iir eps=0.1");
        assert_eq!(t.rows[0].sweep, 1.0);
        assert_eq!(t.rows[2].sweep, 2.0);
        assert_eq!(t.rows[0].best_ns, Some(119));
        assert_relative_eq!(
            t.rows[0].mean_slots.unwrap(),
            12074.629432921576,
            max_relative = FROZEN
        );
        assert_relative_eq!(
            t.rows[1].mean_slots.unwrap(),
            10_000.0 / 0.9,
            max_relative = 1e-12
        );
        assert_eq!(t.rows[2].method, Some(Method::ExactSum));
        assert!(t.rows[2].mean_slots.unwrap() > t.rows[0].mean_slots.unwrap());
        assert!(t.rows[3].mean_slots.unwrap() > t.rows[1].mean_slots.unwrap());
    }

    #[test]
    fn orderstat_comparison_small_slice() {
        let t = orderstat_comparison_table(
            &[10, 100],
            FigureOptions {
                seed: DEFAULT_SEED,
                trials: Some(2_000),
            },
        )
        .unwrap();
        assert_eq!(t.rows.len(), 30);
        let labels: Vec<&str> = t.rows[..15].iter().map(|r| r.scheme.as_str()).collect();
        assert_eq!(
            labels,
            vec![
                "exact k=1",
                "exact k=2",
                "exact k=4",
                "grabner k=1",
                "grabner k=2",
                "grabner k=4",
                "improved k=1",
                "improved k=2",
                "improved k=4",
                "lln k=1",
                "lln k=2",
                "lln k=4",
                "sim k=1",
                "sim k=2",
                "sim k=4",
            ]
        );
        // Wiring: the exact rows are the tail sum itself.
        let exact = max_orderstat_mean_exact(
            &NegBinomialParams::new(2, 0.9).unwrap(),
            10,
            DEFAULT_REL_TOL,
        )
        .unwrap();
        assert_eq!(t.rows[1].mean_slots, Some(exact));
        // At u = 10, eps = 0.1 the decay-rate argument sits exactly on its
        // domain boundary L = 1, where the correction term vanishes.
        assert_eq!(t.rows[3].mean_slots, Some(1.0));
        assert_eq!(t.rows[4].mean_slots, Some(1.0));
        assert_relative_eq!(
            t.rows[9].mean_slots.unwrap(),
            1.0 / 0.9,
            max_relative = 1e-15
        );
        // Simulation tracks the exact value.
        let sim = &t.rows[13];
        assert_eq!(sim.trials, Some(2_000));
        assert!(
            (sim.mean_slots.unwrap() - exact).abs() < 6.0 * sim.std_err.unwrap(),
            "sim {} vs exact {exact}",
            sim.mean_slots.unwrap()
        );
        // No normalization context for a single-packet statistic.
        assert!(t.rows.iter().all(|r| r.normalized.is_none()));
    }
}
