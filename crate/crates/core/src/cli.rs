//! Scenario files and the batch pipeline behind the `mfgc` binary.
//!
//! A scenario is a TOML file:
//!
//! ```toml
//! schema_version = 1
//! name = "interval-congestion"
//! seed = 7
//! output_dir = "out/interval-congestion"
//!
//! [domain]
//! preset = "interval"
//!
//! [lagrangian]
//! preset = "congestion"
//! c1 = 0.01
//! gamma = 1.0
//!
//! [terminal]
//! kind = "target"
//! weight = 0.08
//! target = [1.3]
//!
//! [m0]
//! sample = { density = "uniform", count = 50 }
//! ```
//!
//! Optional tables: `[budget]` (`k1`, `k2`; solved from the data when absent),
//! `[solver]`, `[equilibrium]`, `[approx]` and `[audit]`.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::approx::{approximate_with, ApproxOptions, Approximation, AUDIT_SLACK};
use crate::constants::{solve_k_budget, BFit, ConstantsError, DerivedConstants, KBudget};
use crate::equilibrium::{
    best_response_map, damped_fixed_point_solve, initial_measure, verify_mild_solution, EquilibriumConfig,
    EquilibriumError, Game, MildReport, MildSolution,
};
use crate::geometry::{audit as geometry_audit, build_atlas, Domain};
use crate::lagrangian::{
    legendre_transform, random_joint_measure, random_point_in, verify_hypotheses, HypothesisReport, Lagrangian,
    QuadraticModel, Terminal,
};
use crate::measures::{
    disintegrate_by_initial, flow_lipschitz_check, wasserstein1, PathMeasure, StateAtom, StateMeasure, W1Backend,
};
use crate::trajopt::{BrOptions, ControlPath, TimeGrid};
use crate::vecops::{dot, norm};

pub const SCHEMA_VERSION: u32 = 1;

/// Floor on the budget handed to the approximation audit.
pub const APPROX_BUDGET_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{module}: {message}")]
    Module { module: &'static str, message: String },
    #[error("not converged: exploitability {exploitability:e} after {iterations} steps")]
    NotConverged { exploitability: f64, iterations: usize },
    #[error("{} check(s) failed: {}", checks.len(), checks.join(", "))]
    Failed { checks: Vec<String> },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::NotConverged { .. } => 3,
            CliError::Failed { .. } => 4,
            _ => 1,
        }
    }

    fn config(key: &str, message: impl Into<String>) -> Self {
        CliError::Config { key: key.into(), message: message.into() }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.to_path_buf(), message: e.to_string() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Relative paths resolve against the directory of the scenario file.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub domain: DomainSpec,
    pub lagrangian: LagrangianSpec,
    #[serde(default)]
    pub terminal: TerminalSpec,
    #[serde(default)]
    pub budget: Option<KBudget>,
    pub m0: M0Spec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub equilibrium: EquilibriumConfig,
    #[serde(default)]
    pub approx: ApproxSpec,
    #[serde(default)]
    pub audit: AuditSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub preset: String,
    /// Overrides the preset's collar width.
    #[serde(default)]
    pub collar_width: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagrangianSpec {
    /// `quadratic`, `shifted`, `diagonal`, `congestion` or `radial`.
    pub preset: String,
    #[serde(default = "one")]
    pub t_final: f64,
    #[serde(default)]
    pub c1: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default)]
    pub preferred: Option<Vec<f64>>,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub k: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalSpec {
    /// `zero`, `target` or `sine`.
    pub kind: String,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default)]
    pub target: Option<Vec<f64>>,
}

impl Default for TerminalSpec {
    fn default() -> Self {
        TerminalSpec { kind: "zero".into(), weight: 1.0, target: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub x: Vec<f64>,
    pub weight: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    pub density: String,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct M0Spec {
    #[serde(default)]
    pub atoms: Option<Vec<AtomSpec>>,
    #[serde(default)]
    pub sample: Option<SampleSpec>,
}

/// Overrides applied to [`BrOptions::default`].
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub starts: Option<usize>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub newton: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApproxSpec {
    /// Perturbation sizes `|x_k - x0|`.
    pub eps: Vec<f64>,
    /// Reference particles, one per initial atom in order.
    pub atoms: usize,
    /// Atlas inner radius; defaults to `min(0.2, collar_width / 4)`.
    pub r_hat: Option<f64>,
}

impl Default for ApproxSpec {
    fn default() -> Self {
        ApproxSpec { eps: vec![1e-6, 5e-7], atoms: 2, r_hat: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSpec {
    pub hypothesis_samples: usize,
    pub geometry_points: usize,
    pub legendre_samples: usize,
    pub w1_triples: usize,
    pub flow_pairs: usize,
}

impl Default for AuditSpec {
    fn default() -> Self {
        AuditSpec { hypothesis_samples: 1000, geometry_points: 2000, legendre_samples: 200, w1_triples: 100, flow_pairs: 64 }
    }
}

/// Command-line switches shared by both commands.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub allow_nonconverged: bool,
    pub resume: bool,
}

/// A scenario with its presets resolved.
#[derive(Clone, Debug)]
pub struct Setup {
    pub scenario: Scenario,
    pub seed: u64,
    pub domain: Domain,
    pub model: QuadraticModel,
    pub terminal: Terminal,
    pub m0: StateMeasure,
    pub br: BrOptions,
    pub equilibrium: EquilibriumConfig,
    pub output_dir: PathBuf,
    /// Hash of the scenario text, seed and crate version.
    pub fingerprint: String,
}

impl Setup {
    pub fn r_hat(&self) -> f64 {
        self.scenario.approx.r_hat.unwrap_or(0.2f64.min(0.25 * self.domain.collar_width))
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario, CliError> {
    let de = toml::Deserializer::parse(text).map_err(|e| CliError::config("<file>", e.to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let parent = e.path().to_string();
        let message = e.into_inner().message().trim().to_string();
        let key = match message.strip_prefix("missing field `").and_then(|m| m.split('`').next()) {
            Some(field) if parent == "." => field.to_string(),
            Some(field) => format!("{parent}.{field}"),
            None => parent,
        };
        CliError::config(&key, message)
    })
}

pub fn load_setup(path: &Path, seed_override: Option<u64>) -> Result<Setup, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let scenario = parse_scenario(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let seed = seed_override.or(scenario.seed);
    let mut h = DefaultHasher::new();
    text.hash(&mut h);
    seed.hash(&mut h);
    env!("CARGO_PKG_VERSION").hash(&mut h);
    resolve(scenario, seed, base, format!("{:016x}", h.finish()))
}

/// Resolves presets and validates cross-field constraints.
pub fn resolve(scenario: Scenario, seed: Option<u64>, base: &Path, fingerprint: String) -> Result<Setup, CliError> {
    if scenario.schema_version != SCHEMA_VERSION {
        return Err(CliError::config(
            "schema_version",
            format!("unsupported version {}, expected {SCHEMA_VERSION}", scenario.schema_version),
        ));
    }
    let mut domain = Domain::preset(&scenario.domain.preset).ok_or_else(|| {
        CliError::config("domain.preset", format!("unknown preset `{}`", scenario.domain.preset))
    })?;
    if let Some(w) = scenario.domain.collar_width {
        if !(w.is_finite() && w > 0.0) {
            return Err(CliError::config("domain.collar_width", "must be positive"));
        }
        domain.collar_width = w;
    }
    let d = domain.dim();
    let model = resolve_model(&scenario.lagrangian, &domain)?;
    let terminal = resolve_terminal(&scenario.terminal, &domain)?;
    if let Some(k) = scenario.budget {
        if !(k.k1 > 0.0 && k.k2 > 0.0) {
            return Err(CliError::config("budget", "k1 and k2 must be positive"));
        }
    }
    let m0 = resolve_m0(&scenario.m0, seed, &domain)?;
    let seed = seed.unwrap_or(0);

    let mut br = BrOptions { seed, ..BrOptions::default() };
    let s = &scenario.solver;
    if let Some(v) = s.starts {
        br.starts = v;
    }
    if let Some(v) = s.max_iters {
        br.max_iters = v;
    }
    if let Some(v) = s.tol {
        br.tol = v;
    }
    if let Some(v) = s.newton {
        br.newton = v;
    }
    let equilibrium = EquilibriumConfig { seed, ..scenario.equilibrium.clone() };
    equilibrium.validate().map_err(|e| CliError::config("equilibrium", e.to_string()))?;
    if scenario.approx.eps.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(CliError::config("approx.eps", "perturbations must be positive"));
    }
    if scenario.approx.r_hat.is_some_and(|r| !(r > 0.0)) {
        return Err(CliError::config("approx.r_hat", "must be positive"));
    }
    debug_assert_eq!(m0.atoms[0].x.len(), d);
    let output_dir = base.join(&scenario.output_dir);
    Ok(Setup { scenario, seed, domain, model, terminal, m0, br, equilibrium, output_dir, fingerprint })
}

fn check_len(key: &str, v: &[f64], d: usize) -> Result<(), CliError> {
    if v.len() != d {
        return Err(CliError::config(key, format!("expected {d} entries, got {}", v.len())));
    }
    Ok(())
}

fn resolve_model(spec: &LagrangianSpec, domain: &Domain) -> Result<QuadraticModel, CliError> {
    let d = domain.dim();
    if !(spec.t_final.is_finite() && spec.t_final > 0.0) {
        return Err(CliError::config("lagrangian.t_final", "must be positive"));
    }
    if !(spec.c1.is_finite() && spec.c1 >= 0.0) {
        return Err(CliError::config("lagrangian.c1", "must be non-negative"));
    }
    let need = |key: &'static str, v: &Option<Vec<f64>>| -> Result<Vec<f64>, CliError> {
        let v = v.clone().ok_or_else(|| CliError::config(key, "missing field"))?;
        check_len(key, &v, d)?;
        Ok(v)
    };
    let t = spec.t_final;
    Ok(match spec.preset.as_str() {
        "quadratic" => QuadraticModel::quadratic(d, t, domain),
        "shifted" => QuadraticModel::shifted(need("lagrangian.preferred", &spec.preferred)?, t, domain),
        "diagonal" => {
            let w = need("lagrangian.weights", &spec.weights)?;
            if w.iter().any(|x| !(*x > 0.0)) {
                return Err(CliError::config("lagrangian.weights", "weights must be positive"));
            }
            QuadraticModel::diagonal(w, t, domain)
        }
        "congestion" => {
            if !(0.0..=1.0).contains(&spec.gamma) {
                return Err(CliError::config("lagrangian.gamma", "must lie in [0, 1]"));
            }
            QuadraticModel::congestion(d, spec.c1, spec.gamma, t, domain)
        }
        "radial" => QuadraticModel::radial(d, spec.k, t, domain),
        other => return Err(CliError::config("lagrangian.preset", format!("unknown preset `{other}`"))),
    })
}

fn resolve_terminal(spec: &TerminalSpec, domain: &Domain) -> Result<Terminal, CliError> {
    match spec.kind.as_str() {
        "zero" => Ok(Terminal::zero()),
        "sine" => Ok(Terminal::sine()),
        "target" => {
            let a = spec.target.clone().ok_or_else(|| CliError::config("terminal.target", "missing field"))?;
            check_len("terminal.target", &a, domain.dim())?;
            if !(spec.weight.is_finite() && spec.weight >= 0.0) {
                return Err(CliError::config("terminal.weight", "must be non-negative"));
            }
            Ok(Terminal::target(spec.weight, a, domain))
        }
        other => Err(CliError::config("terminal.kind", format!("unknown kind `{other}`"))),
    }
}

fn resolve_m0(spec: &M0Spec, seed: Option<u64>, domain: &Domain) -> Result<StateMeasure, CliError> {
    let d = domain.dim();
    match (&spec.atoms, &spec.sample) {
        (Some(atoms), None) => {
            if atoms.is_empty() {
                return Err(CliError::config("m0.atoms", "no atoms"));
            }
            for (i, a) in atoms.iter().enumerate() {
                check_len(&format!("m0.atoms[{i}].x"), &a.x, d)?;
                if domain.signed_distance(&a.x) < 0.0 {
                    return Err(CliError::config(&format!("m0.atoms[{i}].x"), "outside the domain"));
                }
                if !(a.weight > 0.0) {
                    return Err(CliError::config(&format!("m0.atoms[{i}].weight"), "must be positive"));
                }
            }
            let mass: f64 = atoms.iter().map(|a| a.weight).sum();
            if (mass - 1.0).abs() > 1e-9 {
                return Err(CliError::config("m0.atoms", format!("weights sum to {mass}, expected 1")));
            }
            Ok(StateMeasure { atoms: atoms.iter().map(|a| StateAtom { x: a.x.clone(), weight: a.weight }).collect() })
        }
        (None, Some(s)) => {
            if s.density != "uniform" {
                return Err(CliError::config("m0.sample.density", format!("unknown density `{}`", s.density)));
            }
            if s.count == 0 {
                return Err(CliError::config("m0.sample.count", "must be positive"));
            }
            let seed = seed.ok_or_else(|| CliError::config("seed", "required when m0 is sampled"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = 1.0 / s.count as f64;
            Ok(StateMeasure {
                atoms: (0..s.count).map(|_| StateAtom { x: random_point_in(&mut rng, domain), weight: w }).collect(),
            })
        }
        _ => Err(CliError::config("m0", "exactly one of `atoms` or `sample` is required")),
    }
}

/// `{"value": v, "provenance": p}`.
fn num(v: f64, provenance: &str) -> Value {
    json!({ "value": v, "provenance": provenance })
}

fn count(v: usize, provenance: &str) -> Value {
    json!({ "value": v, "provenance": provenance })
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Module { module: "cli", message: e.to_string() })?;
            Ok(pool.install(f))
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Plain decimals for moderate magnitudes, scientific otherwise.
fn fmt(x: f64) -> String {
    if x == 0.0 || (1e-4..1e6).contains(&x.abs()) {
        x.to_string()
    } else {
        format!("{x:e}")
    }
}

fn axis_names(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("{prefix}{i}")).collect()
}

/// The output already holds a complete run of the same fingerprint.
fn up_to_date(dir: &Path, summary: &str, fingerprint: &str, files: &[&str]) -> bool {
    let Ok(text) = fs::read_to_string(dir.join(summary)) else {
        return false;
    };
    let Ok(v) = serde_json::from_str::<Value>(&text) else {
        return false;
    };
    v.get("fingerprint").and_then(Value::as_str) == Some(fingerprint) && files.iter().all(|f| dir.join(f).is_file())
}

const RUN_FILES: [&str; 4] = ["measures.json", "value.csv", "sigma.csv", "approx_summary.csv"];
const AUDIT_FILES: [&str; 6] = [
    "audit_geometry.csv",
    "audit_lagrangian.csv",
    "audit_constants.csv",
    "audit_measures.csv",
    "audit_approx.csv",
    "audit_approx_summary.csv",
];

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub resumed: bool,
    pub converged: bool,
    pub exploitability: f64,
    pub certified: bool,
}

/// Budget from the scenario, or solved from the data.
fn budget_of(setup: &Setup) -> Result<(KBudget, Option<(DerivedConstants, BFit)>), ConstantsError> {
    match setup.scenario.budget {
        Some(k) => Ok((k, None)),
        None => solve_k_budget(&setup.model, &setup.terminal, &setup.domain).map(|(k, c, f)| (k, Some((c, f)))),
    }
}

/// `run <config>`: hypotheses, constants, equilibrium, verification and
/// approximation audits.
pub fn run_scenario(path: &Path, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let setup = load_setup(path, opts.seed)?;
    let dir = setup.output_dir.clone();
    if opts.resume && up_to_date(&dir, "report.json", &setup.fingerprint, &RUN_FILES) {
        let v: Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).map_err(|e| CliError::io(&dir, e))?)
            .map_err(|e| CliError::io(&dir, e))?;
        let eq = &v["equilibrium"];
        return Ok(RunSummary {
            output_dir: dir,
            resumed: true,
            converged: eq["converged"].as_bool().unwrap_or(false),
            exploitability: eq["exploitability"]["value"].as_f64().unwrap_or(f64::NAN),
            certified: v["certification"]["all_pass"].as_bool().unwrap_or(false),
        });
    }
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let outcome = with_threads(opts.threads, || pipeline(&setup))??;
    let Outcome { solution, converged, check, report, approx } = outcome;

    write(&dir.join("report.json"), &(serde_json::to_string_pretty(&report).expect("json") + "\n"))?;
    let measures = json!({
        "schema_version": SCHEMA_VERSION,
        "m0": solution.m0,
        "eta": solution.eta,
    });
    write(&dir.join("measures.json"), &(serde_json::to_string_pretty(&measures).expect("json") + "\n"))?;
    write_value_csv(&dir.join("value.csv"), &solution)?;
    write_sigma_csv(&dir.join("sigma.csv"), &solution)?;
    write_approx_csvs(&dir, "", &approx)?;

    let summary = RunSummary {
        output_dir: dir,
        resumed: false,
        converged,
        exploitability: solution.report.exploitability,
        certified: check.all_pass,
    };
    if !converged && !opts.allow_nonconverged {
        return Err(CliError::NotConverged {
            exploitability: solution.report.exploitability,
            iterations: solution.report.iterations,
        });
    }
    if converged && !check.all_pass {
        return Err(CliError::Failed { checks: check.items.iter().filter(|i| !i.pass).map(|i| i.item.clone()).collect() });
    }
    Ok(summary)
}

struct Outcome {
    solution: MildSolution,
    converged: bool,
    check: MildReport,
    report: Value,
    approx: Vec<ApproxRun>,
}

fn pipeline(setup: &Setup) -> Result<Outcome, CliError> {
    let hyp = verify_hypotheses(&setup.model, &setup.terminal, &setup.domain, setup.scenario.audit.hypothesis_samples, setup.seed);
    let (budget, ledger) =
        budget_of(setup).map_err(|e| CliError::Module { module: "constants.solve_k_budget", message: e.to_string() })?;
    let game = Game { domain: &setup.domain, model: &setup.model, terminal: &setup.terminal, budget, br: &setup.br };
    let (solution, converged) = match damped_fixed_point_solve(&setup.equilibrium, &setup.m0, &game) {
        Ok(sol) => (sol, true),
        Err(EquilibriumError::NotConverged(sol)) => (*sol, false),
        Err(e) => return Err(CliError::Module { module: "equilibrium.damped_fixed_point_solve", message: e.to_string() }),
    };
    let check = verify_mild_solution(&solution, &game);
    let approx = approximation_audit(setup, &solution.eta)?;

    let mut report = Map::new();
    report.insert("schema_version".into(), count(SCHEMA_VERSION as usize, "cli.SCHEMA_VERSION"));
    report.insert("fingerprint".into(), json!(setup.fingerprint));
    report.insert("scenario".into(), scenario_json(setup));
    report.insert("hypotheses".into(), hypotheses_json(&hyp));
    report.insert("constants".into(), constants_json(setup, &budget, ledger.as_ref()));
    report.insert("equilibrium".into(), equilibrium_json(&solution, converged));
    report.insert("certification".into(), certification_json(&check));
    report.insert("approximation".into(), approx_json(&approx));
    Ok(Outcome { solution, converged, check, report: Value::Object(report), approx })
}

fn scenario_json(setup: &Setup) -> Value {
    json!({
        "name": setup.scenario.name,
        "seed": count(setup.seed as usize, "scenario.seed"),
        "domain": setup.domain.name,
        "collar_width": num(setup.domain.collar_width, "geometry.Domain.collar_width"),
        "lagrangian": setup.model.name,
        "terminal": setup.scenario.terminal.kind,
        "t_final": num(setup.model.t_final, "scenario.lagrangian.t_final"),
        "c1": num(setup.model.c1(), "scenario.lagrangian.c1"),
        "m0_atoms": count(setup.m0.atoms.len(), "scenario.m0"),
    })
}

fn hypotheses_json(h: &HypothesisReport) -> Value {
    let rows: Vec<Value> = h
        .rows
        .iter()
        .map(|r| {
            json!({
                "hypothesis": r.hypothesis,
                "declared": num(r.declared, "lagrangian.Lagrangian.constants"),
                "worst_ratio": num(r.worst_ratio, "lagrangian.verify_hypotheses"),
                "pass": r.pass,
            })
        })
        .collect();
    json!({
        "samples": count(h.samples, "lagrangian.verify_hypotheses"),
        "rows": rows,
        "all_pass": h.all_pass(),
    })
}

fn constants_json(setup: &Setup, budget: &KBudget, ledger: Option<&(DerivedConstants, BFit)>) -> Value {
    let source = if setup.scenario.budget.is_some() { "scenario.budget" } else { "constants.solve_k_budget" };
    let mut out = Map::new();
    out.insert("k1".into(), num(budget.k1, source));
    out.insert("k2".into(), num(budget.k2, source));
    let k = setup.model.declared;
    out.insert(
        "declared".into(),
        json!({
            "n1": num(k.n1, "lagrangian.QuadraticModel.computed_constants"),
            "c": num(k.c, "lagrangian.QuadraticModel.computed_constants"),
            "k1": num(k.k1, "lagrangian.QuadraticModel.computed_constants"),
            "kappa1": num(k.kappa1, "lagrangian.QuadraticModel.computed_constants"),
            "c1": num(k.c1, "lagrangian.QuadraticModel.computed_constants"),
        }),
    );
    if let Some((c, f)) = ledger {
        let rows: Vec<Value> = c
            .ledger()
            .into_iter()
            .map(|(name, value, formula)| json!({ "name": name, "value": value, "provenance": formula }))
            .collect();
        out.insert("ledger".into(), Value::Array(rows));
        out.insert(
            "b_fit".into(),
            json!({
                "b1": num(f.b1, "constants.fit_b"),
                "b2": num(f.b2, "constants.fit_b"),
                "b3": num(f.b3, "constants.fit_b"),
                "b4": num(f.b4, "constants.fit_b"),
                "b5": num(f.b5, "constants.fit_b"),
                "b6": num(f.b6, "constants.fit_b"),
            }),
        );
    }
    Value::Object(out)
}

fn equilibrium_json(sol: &MildSolution, converged: bool) -> Value {
    let r = &sol.report;
    let p = "equilibrium.damped_fixed_point_solve";
    let history: Vec<Value> = r
        .history
        .iter()
        .map(|h| {
            json!({
                "iteration": count(h.iteration, p),
                "exploitability": num(h.exploitability, "equilibrium.exploitability"),
                "min_gap": num(h.min_gap, "equilibrium.exploitability"),
                "fixed_point_residual": num(h.fixed_point_residual, if h.residual_exact { "measures.wasserstein1" } else { "equilibrium.coupling_bound" }),
                "alpha": num(h.alpha, "equilibrium.Damping.alpha"),
                "w1_step": num(h.w1_step, "alpha * W1(eta, E(eta))"),
                "particles": count(h.particles, p),
                "pruned_mass": num(h.pruned_mass, "measures.PathMeasure.prune"),
            })
        })
        .collect();
    let b = &r.budget;
    json!({
        "converged": converged,
        "fixed_point": r.fixed_point,
        "iterations": count(r.iterations, p),
        "selected": count(r.selected, p),
        "exploitability": num(r.exploitability, "equilibrium.exploitability"),
        "pruned_mass": num(r.pruned_mass, "measures.PathMeasure.prune"),
        "mass_error": num(r.mass_error, "|eta(total) - 1|"),
        "particles": count(sol.eta.particles.len(), p),
        "history": history,
        "budget_audit": {
            "violations": count(b.violations, "equilibrium.budget_audit"),
            "max_sup": num(b.max_sup, "equilibrium.budget_audit"),
            "max_lipschitz": num(b.max_lipschitz, "equilibrium.budget_audit"),
            "min_distance": num(b.min_distance, "equilibrium.budget_audit"),
            "pass": b.pass,
        },
        "flow_lipschitz": {
            "pairs": count(r.flow.pairs, "measures.flow_lipschitz_check"),
            "worst_ratio": num(r.flow.worst_ratio, "measures.flow_lipschitz_check"),
            "worst_excess": num(r.flow.worst_excess, "measures.flow_lipschitz_check"),
            "pass": r.flow.pass,
        },
        "atom_values": sol.atom_values.iter().map(|a| json!({
            "x0": a.x0.iter().map(|x| num(*x, "scenario.m0")).collect::<Vec<_>>(),
            "mass": num(a.mass, "measures.disintegrate_by_initial"),
            "value": num(a.value, "equilibrium.value_function"),
        })).collect::<Vec<_>>(),
    })
}

fn certification_json(m: &MildReport) -> Value {
    let items: Vec<Value> = m
        .items
        .iter()
        .map(|i| {
            json!({
                "item": i.item,
                "pass": i.pass,
                "worst": num(i.worst, "equilibrium.verify_mild_solution"),
                "detail": i.detail,
            })
        })
        .collect();
    json!({
        "items": items,
        "max_gap": num(m.max_gap, "equilibrium.verify_mild_solution"),
        "all_pass": m.all_pass,
    })
}

fn write_value_csv(path: &Path, sol: &MildSolution) -> Result<(), CliError> {
    let v = &sol.value;
    let d = v.points.first().map_or(0, Vec::len);
    let mut header = vec!["t".to_string()];
    header.extend(axis_names("x", d));
    header.push("V".into());
    let mut rows = Vec::new();
    for (ti, t) in v.times.iter().enumerate() {
        for (pi, x) in v.points.iter().enumerate() {
            let mut r = vec![fmt(*t)];
            r.extend(x.iter().map(|v| fmt(*v)));
            r.push(fmt(v.get(ti, pi)));
            rows.push(r);
        }
    }
    write_rows(path, &header, &rows)
}

fn write_sigma_csv(path: &Path, sol: &MildSolution) -> Result<(), CliError> {
    let grid = sol.eta.grid;
    let mut header = vec!["node".to_string(), "t".to_string()];
    header.extend(axis_names("x", sol.eta.dim));
    header.push("weight".into());
    let mut rows = Vec::new();
    for (i, s) in sol.sigma.iter().enumerate() {
        for a in &s.atoms {
            let mut r = vec![i.to_string(), fmt(grid.time(i))];
            r.extend(a.x.iter().map(|v| fmt(*v)));
            r.push(fmt(a.weight));
            rows.push(r);
        }
    }
    write_rows(path, &header, &rows)
}

/// One approximation run on a reference particle.
#[derive(Clone, Debug)]
pub struct ApproxRun {
    pub atom: usize,
    pub x0: Vec<f64>,
    pub eps: f64,
    pub budget: KBudget,
    pub result: Result<Approximation, String>,
}

impl ApproxRun {
    /// Measured postconditions hold and every case audit passed.
    pub fn pass(&self) -> bool {
        match &self.result {
            Ok(a) => a.feasible && a.within_inflated_budget && a.sup_gap <= a.gap_bound + AUDIT_SLACK && a.failures.is_empty(),
            Err(_) => false,
        }
    }
}

/// Heaviest particle of each of the first `atoms` initial atoms.
fn references(eta: &PathMeasure, atoms: usize) -> Vec<(usize, Vec<f64>, ControlPath)> {
    disintegrate_by_initial(eta)
        .into_iter()
        .take(atoms)
        .enumerate()
        .map(|(i, c)| {
            let mut best = &c.measure.particles[0];
            for p in &c.measure.particles {
                if p.weight > best.weight {
                    best = p;
                }
            }
            (i, c.x0, best.control.clone())
        })
        .collect()
}

/// Runs the best-effort construction from every reference particle and
/// perturbation size, pushing the start inward.
pub fn approximation_audit(setup: &Setup, eta: &PathMeasure) -> Result<Vec<ApproxRun>, CliError> {
    let spec = &setup.scenario.approx;
    let atlas = build_atlas(&setup.domain, setup.r_hat())
        .map_err(|e| CliError::Module { module: "geometry.build_atlas", message: e.to_string() })?;
    let opts = ApproxOptions { best_effort: true };
    let mut out = Vec::new();
    for (atom, x0, u0) in references(eta, spec.atoms) {
        let budget = KBudget::new(
            (u0.sup_norm() * (1.0 + 1e-12)).max(APPROX_BUDGET_FLOOR),
            (u0.lipschitz() * (1.0 + 1e-12)).max(APPROX_BUDGET_FLOOR),
        );
        let mut dir = setup.domain.distance_gradient(&x0);
        let n = norm(&dir);
        if n < 0.5 {
            dir = vec![0.0; x0.len()];
            dir[0] = 1.0;
        } else {
            dir.iter_mut().for_each(|c| *c /= n);
        }
        for &eps in &spec.eps {
            let xk: Vec<f64> = x0.iter().zip(&dir).map(|(a, b)| a + eps * b).collect();
            let result =
                approximate_with(&setup.domain, &atlas, &u0, &x0, &xk, &budget, opts).map_err(|e| e.to_string());
            out.push(ApproxRun { atom, x0: x0.clone(), eps, budget, result });
        }
    }
    Ok(out)
}

fn approx_json(runs: &[ApproxRun]) -> Value {
    let p = "approx.approximate_with";
    let rows: Vec<Value> = runs
        .iter()
        .map(|r| {
            let mut m = Map::new();
            m.insert("atom".into(), count(r.atom, "measures.disintegrate_by_initial"));
            m.insert("eps".into(), num(r.eps, "scenario.approx.eps"));
            m.insert("k1".into(), num(r.budget.k1, "max(sup|u|, 1e-3)"));
            m.insert("k2".into(), num(r.budget.k2, "max(Lip(u), 1e-3)"));
            match &r.result {
                Ok(a) => {
                    m.insert("sup_gap".into(), num(a.sup_gap, p));
                    m.insert("gap_bound".into(), num(a.gap_bound, "(3M)^L eps"));
                    m.insert("segments".into(), count(a.segments.len(), p));
                    m.insert("feasible".into(), json!(a.feasible));
                    m.insert("within_inflated_budget".into(), json!(a.within_inflated_budget));
                    m.insert("within_eps_max".into(), json!(a.within_eps_max));
                    m.insert("failures".into(), json!(a.failures));
                }
                Err(e) => {
                    m.insert("error".into(), json!(e));
                }
            }
            m.insert("pass".into(), json!(r.pass()));
            Value::Object(m)
        })
        .collect();
    json!({ "runs": rows, "all_pass": runs.iter().all(ApproxRun::pass) })
}

fn opt_f64(v: Option<f64>) -> String {
    v.map_or(String::new(), fmt)
}

fn opt_usize(v: Option<usize>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// `{prefix}approx_case{1..4}.csv` with one row per segment, and
/// `{prefix}approx_summary.csv`.
pub fn write_approx_csvs(dir: &Path, prefix: &str, runs: &[ApproxRun]) -> Result<(), CliError> {
    let header: Vec<String> = [
        "atom", "eps", "ell", "t_start", "t_end", "chart_start", "chart_end", "lambda", "halvings",
        "position_gap", "velocity_gap", "distance_gap", "reference_distance", "bound", "min_distance", "pass",
        "failure",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for case in 1..=4u8 {
        let mut rows = Vec::new();
        for r in runs {
            let Ok(a) = &r.result else { continue };
            for s in a.segments.iter().filter(|s| s.case == case) {
                rows.push(vec![
                    r.atom.to_string(),
                    fmt(r.eps),
                    s.ell.to_string(),
                    fmt(s.t_start),
                    fmt(s.t_end),
                    opt_usize(s.chart_start),
                    opt_usize(s.chart_end),
                    opt_f64(s.lambda),
                    s.halvings.to_string(),
                    fmt(s.position_gap),
                    fmt(s.velocity_gap),
                    fmt(s.distance_gap),
                    fmt(s.reference_distance),
                    fmt(s.bound),
                    fmt(s.min_distance),
                    s.failed.is_none().to_string(),
                    s.failed.clone().unwrap_or_default(),
                ]);
            }
        }
        write_rows(&dir.join(format!("{prefix}approx_case{case}.csv")), &header, &rows)?;
    }
    let header: Vec<String> = [
        "atom", "eps", "k1", "k2", "sup_gap", "gap_bound", "feasible", "within_inflated_budget", "within_eps_max",
        "pass", "failures",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            let mut row = vec![r.atom.to_string(), fmt(r.eps), fmt(r.budget.k1), fmt(r.budget.k2)];
            match &r.result {
                Ok(a) => row.extend([
                    fmt(a.sup_gap),
                    fmt(a.gap_bound),
                    a.feasible.to_string(),
                    a.within_inflated_budget.to_string(),
                    a.within_eps_max.to_string(),
                    r.pass().to_string(),
                    a.failures.join("; "),
                ]),
                Err(e) => row.extend([
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    "false".into(),
                    e.clone(),
                ]),
            }
            row
        })
        .collect();
    write_rows(&dir.join(format!("{prefix}approx_summary.csv")), &header, &rows)
}

/// One line of an audit CSV.
#[derive(Clone, Debug, Serialize)]
pub struct AuditRow {
    pub check: String,
    pub worst: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub detail: String,
}

impl AuditRow {
    fn new(check: &str, worst: f64, tolerance: f64) -> Self {
        AuditRow {
            check: check.into(),
            worst,
            tolerance,
            pass: worst.is_finite() && worst <= tolerance,
            detail: String::new(),
        }
    }

    fn failed(check: &str, detail: String) -> Self {
        AuditRow { check: check.into(), worst: f64::NAN, tolerance: f64::NAN, pass: false, detail }
    }
}

#[derive(Clone, Debug)]
pub struct AuditSummary {
    pub output_dir: PathBuf,
    pub resumed: bool,
    /// `(suite, rows)` in output order.
    pub suites: Vec<(String, Vec<AuditRow>)>,
}

impl AuditSummary {
    /// `suite/check` names of failing rows.
    pub fn failed(&self) -> Vec<String> {
        self.suites
            .iter()
            .flat_map(|(suite, rows)| rows.iter().filter(|r| !r.pass).map(move |r| format!("{suite}/{}", r.check)))
            .collect()
    }
}

pub fn geometry_suite(setup: &Setup) -> Vec<AuditRow> {
    let atlas = match build_atlas(&setup.domain, setup.r_hat()) {
        Ok(a) => a,
        Err(e) => return vec![AuditRow::failed("atlas_build", e.to_string())],
    };
    geometry_audit::run(&setup.domain, &atlas, setup.scenario.audit.geometry_points, setup.seed)
        .into_iter()
        .map(|r| AuditRow { check: r.check, worst: r.worst, tolerance: r.tolerance, pass: r.pass, detail: String::new() })
        .collect()
}

/// Hypothesis rows plus sampled Fenchel inequality and equality at the maximizer.
pub fn lagrangian_suite(setup: &Setup) -> Vec<AuditRow> {
    let audit = &setup.scenario.audit;
    let hyp = verify_hypotheses(&setup.model, &setup.terminal, &setup.domain, audit.hypothesis_samples, setup.seed);
    let mut rows: Vec<AuditRow> = hyp
        .rows
        .iter()
        .map(|r| AuditRow {
            check: r.hypothesis.clone(),
            worst: r.worst_ratio,
            tolerance: 1.0,
            pass: r.pass,
            detail: format!("declared {}", r.declared),
        })
        .collect();
    let model: &dyn Lagrangian = &setup.model;
    let d = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ 0x1e6e);
    let (mut ineq, mut eq, mut solve_failures) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..audit.legendre_samples {
        let t = rng.gen_range(0.0..model.horizon());
        let x = random_point_in(&mut rng, &setup.domain);
        let p: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let atoms = rng.gen_range(1..=4);
        let s = model.summarize(&random_joint_measure(&mut rng, &setup.domain, atoms, 3.0));
        let Ok((h, v)) = legendre_transform(model, t, &x, &p, &s) else {
            solve_failures += 1;
            continue;
        };
        eq = eq.max((h - (dot(&p, &v) - model.value(t, &x, &v, &s))).abs());
        for _ in 0..4 {
            let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-10.0..10.0)).collect();
            ineq = ineq.max(dot(&p, &w) - model.value(t, &x, &w, &s) - h);
        }
    }
    rows.push(AuditRow::new("fenchel_inequality", ineq, 1e-8));
    rows.push(AuditRow::new("fenchel_equality_at_maximizer", eq, 1e-8));
    rows.push(AuditRow::new("legendre_solve_failures", solve_failures as f64, 0.0));
    rows
}

pub fn constants_suite(setup: &Setup) -> Vec<AuditRow> {
    match solve_k_budget(&setup.model, &setup.terminal, &setup.domain) {
        Ok((k, c, _)) => vec![
            AuditRow::new("smallness", 0.0, 0.0),
            AuditRow::new("k_tilde1_below_k1", c.k_tilde1 / k.k1, 1.0 - f64::EPSILON),
            AuditRow::new("k_tilde2_below_k2", c.k_tilde2 / k.k2, 1.0 - f64::EPSILON),
        ],
        Err(ConstantsError::SmallnessViolated { c1, rate }) => {
            let mut r = AuditRow::new("smallness", rate, 1.0);
            r.pass = false;
            r.detail = format!("SmallnessViolated: c1 = {c1}, b6 c1 + c2 = {rate}");
            vec![r]
        }
        Err(e) => vec![AuditRow::failed("budget", e.to_string())],
    }
}

fn random_state_measure(rng: &mut ChaCha8Rng, domain: &Domain, atoms: usize) -> StateMeasure {
    let w: Vec<f64> = (0..atoms).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = w.iter().sum();
    StateMeasure {
        atoms: w.iter().map(|wi| StateAtom { x: random_point_in(rng, domain), weight: wi / total }).collect(),
    }
}

/// W1 metric axioms on random measures, `m0` mass, and the flow Lipschitz
/// check on `eta` when one is available.
pub fn measures_suite(setup: &Setup, eta: Option<(&PathMeasure, &KBudget)>) -> Vec<AuditRow> {
    let audit = &setup.scenario.audit;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ 0x3e1);
    let (mut tri, mut sym, mut ident, mut errors) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for _ in 0..audit.w1_triples {
        let sizes: Vec<usize> = (0..3).map(|_| rng.gen_range(1..=30)).collect();
        let a = random_state_measure(&mut rng, &setup.domain, sizes[0]);
        let b = random_state_measure(&mut rng, &setup.domain, sizes[1]);
        let c = random_state_measure(&mut rng, &setup.domain, sizes[2]);
        let w = |x: &StateMeasure, y: &StateMeasure| wasserstein1(x, y, W1Backend::Flow);
        match (w(&a, &b), w(&b, &c), w(&a, &c), w(&b, &a), w(&a, &a)) {
            (Ok(ab), Ok(bc), Ok(ac), Ok(ba), Ok(aa)) => {
                tri = tri.max(ac - ab - bc);
                sym = sym.max((ab - ba).abs());
                ident = ident.max(aa);
            }
            _ => errors += 1,
        }
    }
    let mut rows = vec![
        AuditRow::new("w1_triangle", tri, 1e-9),
        AuditRow::new("w1_symmetry", sym, 1e-9),
        AuditRow::new("w1_identity", ident, 1e-12),
        AuditRow::new("w1_errors", errors as f64, 0.0),
        AuditRow::new("m0_mass", (setup.m0.mass() - 1.0).abs(), 1e-12),
    ];
    match eta {
        Some((eta, budget)) => {
            let f = flow_lipschitz_check(eta, budget, audit.flow_pairs, setup.seed);
            rows.push(AuditRow::new("flow_lipschitz_excess", f.worst_excess.max(0.0), 1e-8));
            rows.push(AuditRow::new("path_measure_mass", (eta.mass() - 1.0).abs(), 1e-9));
            let marginal = eta.initial_marginal();
            let w = wasserstein1(&marginal, &setup.m0, W1Backend::Flow).unwrap_or(f64::INFINITY);
            rows.push(AuditRow::new("initial_marginal_w1", w, 1e-12));
        }
        None => rows.push(AuditRow::failed("flow_lipschitz_excess", "no budget available".into())),
    }
    rows
}

fn approx_rows(runs: &[ApproxRun]) -> Vec<AuditRow> {
    runs.iter()
        .map(|r| {
            let name = format!("atom{}_eps{:e}", r.atom, r.eps);
            match &r.result {
                Ok(a) => AuditRow {
                    check: name,
                    worst: a.sup_gap,
                    tolerance: a.gap_bound + AUDIT_SLACK,
                    pass: r.pass(),
                    detail: a.failures.join("; "),
                },
                Err(e) => AuditRow::failed(&name, e.clone()),
            }
        })
        .collect()
}

fn write_audit_csv(path: &Path, rows: &[AuditRow]) -> Result<(), CliError> {
    let header: Vec<String> = ["check", "worst", "tolerance", "pass", "detail"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.check.clone(), fmt(r.worst), fmt(r.tolerance), r.pass.to_string(), r.detail.clone()])
        .collect();
    write_rows(path, &header, &rows)
}

/// `audit <config>`: geometry, lagrangian, constants, measures and
/// approximation suites. Reference paths are the best responses to the
/// starting measure.
pub fn run_audits(path: &Path, opts: &RunOptions) -> Result<AuditSummary, CliError> {
    let setup = load_setup(path, opts.seed)?;
    let dir = setup.output_dir.clone();
    if opts.resume && up_to_date(&dir, "audit.json", &setup.fingerprint, &AUDIT_FILES) {
        let v: Value = serde_json::from_str(&fs::read_to_string(dir.join("audit.json")).map_err(|e| CliError::io(&dir, e))?)
            .map_err(|e| CliError::io(&dir, e))?;
        let checks: Vec<String> = v["failed"]
            .as_array()
            .map(|a| a.iter().filter_map(|c| c.as_str().map(String::from)).collect())
            .unwrap_or_default();
        if !checks.is_empty() {
            return Err(CliError::Failed { checks });
        }
        return Ok(AuditSummary { output_dir: dir, resumed: true, suites: Vec::new() });
    }
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let (suites, runs) = with_threads(opts.threads, || audit_suites(&setup))??;
    for (name, rows) in &suites {
        write_audit_csv(&dir.join(format!("audit_{name}.csv")), rows)?;
    }
    write_approx_csvs(&dir, "audit_", &runs)?;
    let summary = AuditSummary { output_dir: dir.clone(), resumed: false, suites };
    let failed = summary.failed();
    let mut per_suite = Map::new();
    for (name, rows) in &summary.suites {
        per_suite.insert(
            name.clone(),
            json!({
                "checks": count(rows.len(), "cli.run_audits"),
                "failed": count(rows.iter().filter(|r| !r.pass).count(), "cli.run_audits"),
            }),
        );
    }
    let doc = json!({
        "schema_version": count(SCHEMA_VERSION as usize, "cli.SCHEMA_VERSION"),
        "fingerprint": setup.fingerprint,
        "suites": per_suite,
        "failed": failed,
    });
    write(&dir.join("audit.json"), &(serde_json::to_string_pretty(&doc).expect("json") + "\n"))?;
    if !failed.is_empty() {
        return Err(CliError::Failed { checks: failed });
    }
    Ok(summary)
}

type Suites = Vec<(String, Vec<AuditRow>)>;

fn audit_suites(setup: &Setup) -> Result<(Suites, Vec<ApproxRun>), CliError> {
    let geometry = geometry_suite(setup);
    let lagrangian = lagrangian_suite(setup);
    let constants = constants_suite(setup);
    let budget = budget_of(setup).ok().map(|(k, _)| k);
    let reference = match budget {
        Some(budget) => {
            let game = Game { domain: &setup.domain, model: &setup.model, terminal: &setup.terminal, budget, br: &setup.br };
            let grid = TimeGrid::new(setup.model.t_final, setup.equilibrium.steps);
            let eta0 = initial_measure(&setup.m0, grid, setup.equilibrium.particles_per_atom, setup.seed, &game)
                .and_then(|eta0| best_response_map(&eta0, &game));
            Some(eta0.map(|eta| (eta, budget)))
        }
        None => None,
    };
    let (measures, runs, approx) = match &reference {
        Some(Ok((eta, budget))) => {
            let runs = approximation_audit(setup, eta)?;
            let rows = approx_rows(&runs);
            (measures_suite(setup, Some((eta, budget))), runs, rows)
        }
        Some(Err(e)) => {
            let msg = format!("reference best responses: {e}");
            (measures_suite(setup, None), Vec::new(), vec![AuditRow::failed("reference", msg)])
        }
        None => (
            measures_suite(setup, None),
            Vec::new(),
            vec![AuditRow::failed("reference", "no budget available".into())],
        ),
    };
    Ok((
        vec![
            ("geometry".into(), geometry),
            ("lagrangian".into(), lagrangian),
            ("constants".into(), constants),
            ("measures".into(), measures),
            ("approx".into(), approx),
        ],
        runs,
    ))
}
