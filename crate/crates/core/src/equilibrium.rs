//! Equilibrium search over path measures.
//!
//! One sweep solves a constrained best response per initial atom against a
//! frozen snapshot of the measure. The same sweep yields the exploitability of
//! the snapshot and its image under the best-response map, so the damped
//! iteration costs one sweep per step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::KBudget;
use crate::geometry::Domain;
use crate::lagrangian::{Lagrangian, TerminalCost};
use crate::measures::{
    disintegrate_by_initial, flow_lipschitz_check, push_forward_at_node, state_marginal, wasserstein1,
    Conditional, FlowLipschitzReport, Particle, PathMeasure, StateAtom, StateMeasure, W1Backend, SNAP,
};
use crate::trajopt::{
    best_response_env, rollout, BrOptions, ControlPath, MeanFieldEnv, StatePath, TimeGrid, TrajError, FEAS_TOL,
};
use crate::vecops::dist;

/// Particles lighter than this are dropped after each mixing step.
pub const PRUNE_THRESHOLD: f64 = 1e-6;
/// Largest atom-count product for which the fixed-point residual is solved exactly.
pub const EXACT_W1_LIMIT: usize = 250_000;
/// Time pairs sampled by the flow Lipschitz check.
pub const FLOW_PAIRS: usize = 64;

/// Everything a best response needs besides the measure.
#[derive(Clone, Copy, Debug)]
pub struct Game<'a> {
    pub domain: &'a Domain,
    pub model: &'a dyn Lagrangian,
    pub terminal: &'a dyn TerminalCost,
    pub budget: KBudget,
    pub br: &'a BrOptions,
}

#[derive(Debug, Error)]
pub enum EquilibriumError {
    #[error("invalid equilibrium config: {0}")]
    InvalidConfig(String),
    #[error("initial atom {index} lies outside the domain (b = {distance:e})")]
    InfeasibleAtom { index: usize, distance: f64 },
    #[error("initial measure has no atoms")]
    EmptyMeasure,
    #[error("best response for atom {atom} failed: {source}")]
    Solver { atom: usize, source: TrajError },
    #[error("no certified equilibrium after {} iterations (exploitability {:e})", .0.report.iterations, .0.report.exploitability)]
    NotConverged(Box<MildSolution>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "alpha", rename_all = "kebab-case")]
pub enum Damping {
    /// `alpha_k = 2 / (k + 2)`.
    FictitiousPlay,
    Fixed(f64),
}

impl Damping {
    pub fn alpha(&self, k: usize) -> f64 {
        match *self {
            Damping::FictitiousPlay => 2.0 / (k as f64 + 2.0),
            Damping::Fixed(a) => a,
        }
    }
}

/// Lattice on which `V(t, x)` is extracted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueGridSpec {
    /// Number of evenly spaced grid nodes, always including `0` and `T`.
    pub time_samples: usize,
    pub points_per_axis: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EquilibriumConfig {
    pub particles_per_atom: usize,
    pub damping: Damping,
    pub max_iterations: usize,
    pub exploitability_tol: f64,
    /// The fixed-point residual `W1(eta, E(eta))` is flagged below this.
    pub w1_tol: f64,
    /// Per-particle optimality gap accepted by [`verify_mild_solution`].
    pub optimality_tol: f64,
    pub seed: u64,
    /// Grid cells on `[0, T]`.
    pub steps: usize,
    pub value_grid: ValueGridSpec,
}

impl Default for EquilibriumConfig {
    fn default() -> Self {
        EquilibriumConfig {
            particles_per_atom: 1,
            damping: Damping::FictitiousPlay,
            max_iterations: 200,
            exploitability_tol: 1e-3,
            w1_tol: 1e-6,
            optimality_tol: 1e-3,
            seed: 0,
            steps: 40,
            value_grid: ValueGridSpec { time_samples: 5, points_per_axis: 11 },
        }
    }
}

impl EquilibriumConfig {
    /// `alpha = 0` is accepted and runs without updates.
    pub fn validate(&self) -> Result<(), EquilibriumError> {
        let bad = |m: &str| Err(EquilibriumError::InvalidConfig(m.to_string()));
        if let Damping::Fixed(a) = self.damping {
            if !(0.0..=1.0).contains(&a) {
                return bad("damping alpha must lie in [0, 1]");
            }
        }
        if self.particles_per_atom == 0 {
            return bad("particles_per_atom must be positive");
        }
        if !(self.exploitability_tol > 0.0 && self.w1_tol > 0.0 && self.optimality_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if self.value_grid.time_samples < 2 || self.value_grid.points_per_axis < 2 {
            return bad("value grid needs at least two samples per axis");
        }
        Ok(())
    }
}

/// Best response and per-particle gaps of one initial atom.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AtomGap {
    pub atom: usize,
    pub x0: Vec<f64>,
    pub mass: f64,
    /// `min(BR cost, best particle cost)`.
    pub value: f64,
    /// Particle costs `I^{x0}[u; eta]` in conditional order.
    pub costs: Vec<f64>,
    /// Absolute particle weights in conditional order.
    pub weights: Vec<f64>,
    /// The solver did not beat the best existing particle.
    pub kept_particle: bool,
    #[serde(skip)]
    control: Option<ControlPath>,
    #[serde(skip)]
    state: Option<StatePath>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Exploitability {
    /// `sum w max(0, I[u] - BR)`.
    pub value: f64,
    /// `sum w (I[u] - BR)` without clipping.
    pub signed: f64,
    pub min_gap: f64,
    pub max_gap: f64,
    pub atoms: Vec<AtomGap>,
    /// Atoms whose best response failed; they do not contribute.
    pub skipped: Vec<(usize, String)>,
}

fn atom_gap(index: usize, cond: &Conditional, env: &MeanFieldEnv, game: &Game) -> Result<AtomGap, TrajError> {
    let costs: Vec<f64> = cond
        .measure
        .particles
        .iter()
        .map(|p| env.cost(&cond.x0, &p.control, game.model, game.terminal, game.domain))
        .collect();
    let weights: Vec<f64> = cond.measure.particles.iter().map(|p| cond.mass * p.weight).collect();
    let best = (0..costs.len())
        .min_by(|&a, &b| costs[a].total_cmp(&costs[b]))
        .expect("conditional has particles");
    let mut opts = game.br.clone();
    opts.seed = opts.seed.wrapping_add(index as u64);
    let warm = &cond.measure.particles[best].control;
    let br = best_response_env(&cond.x0, env, &game.budget, game.model, game.terminal, game.domain, &opts, Some(warm))?;
    let keep = costs[best] < br.cost && rollout(&cond.x0, warm, game.domain).feasible;
    let (value, control, state) = if keep {
        (costs[best], warm.clone(), rollout(&cond.x0, warm, game.domain))
    } else {
        (br.cost, br.control, br.state)
    };
    Ok(AtomGap {
        atom: index,
        x0: cond.x0.clone(),
        mass: cond.mass,
        value,
        costs,
        weights,
        kept_particle: keep,
        control: Some(control),
        state: Some(state),
    })
}

fn gaps(eta: &PathMeasure, game: &Game) -> Vec<Result<AtomGap, TrajError>> {
    let env = MeanFieldEnv::new(eta, game.model, game.terminal);
    let conds = disintegrate_by_initial(eta);
    conds.par_iter().enumerate().map(|(i, c)| atom_gap(i, c, &env, game)).collect()
}

fn summarize(results: Vec<Result<AtomGap, TrajError>>) -> Exploitability {
    let mut out = Exploitability {
        value: 0.0,
        signed: 0.0,
        min_gap: f64::INFINITY,
        max_gap: f64::NEG_INFINITY,
        atoms: Vec::new(),
        skipped: Vec::new(),
    };
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(a) => {
                for (c, w) in a.costs.iter().zip(&a.weights) {
                    let gap = c - a.value;
                    out.value += w * gap.max(0.0);
                    out.signed += w * gap;
                    out.min_gap = out.min_gap.min(gap);
                    out.max_gap = out.max_gap.max(gap);
                }
                out.atoms.push(a);
            }
            Err(e) => out.skipped.push((i, e.to_string())),
        }
    }
    out
}

/// Weighted excess of particle cost over best-response cost.
pub fn exploitability(eta: &PathMeasure, game: &Game) -> Exploitability {
    summarize(gaps(eta, game))
}

fn image(eta: &PathMeasure, atoms: &[AtomGap]) -> PathMeasure {
    let particles = atoms
        .iter()
        .map(|a| Particle {
            state: a.state.clone().expect("sweep state"),
            control: a.control.clone().expect("sweep control"),
            weight: a.mass,
        })
        .collect();
    PathMeasure::new(eta.grid, eta.dim, particles)
}

/// One best response per initial atom, each carrying the atom's mass.
pub fn best_response_map(eta: &PathMeasure, game: &Game) -> Result<PathMeasure, EquilibriumError> {
    let atoms = gaps(eta, game)
        .into_iter()
        .enumerate()
        .map(|(atom, r)| r.map_err(|source| EquilibriumError::Solver { atom, source }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(image(eta, &atoms))
}

/// Starting measure: `u = 0` plus seeded constant velocities, halved until feasible.
pub fn initial_measure(m0: &StateMeasure, grid: TimeGrid, per_atom: usize, seed: u64, game: &Game) -> Result<PathMeasure, EquilibriumError> {
    if m0.atoms.is_empty() {
        return Err(EquilibriumError::EmptyMeasure);
    }
    let d = game.domain.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vmax = game.budget.k1.min(game.domain.diameter() / grid.t_final);
    let mut particles = Vec::with_capacity(m0.atoms.len() * per_atom);
    for (index, atom) in m0.atoms.iter().enumerate() {
        let b = game.domain.signed_distance(&atom.x);
        if b < -FEAS_TOL {
            return Err(EquilibriumError::InfeasibleAtom { index, distance: b });
        }
        for j in 0..per_atom {
            let mut v = vec![0.0; d];
            if j > 0 {
                let dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = dist(&dir, &vec![0.0; d]).max(1e-12);
                let speed = rng.gen_range(0.0..vmax);
                v = dir.iter().map(|c| c * speed / n).collect();
            }
            let mut control = ControlPath::constant(grid, &v);
            let mut state = rollout(&atom.x, &control, game.domain);
            while !state.feasible {
                control.u.iter_mut().for_each(|c| *c *= 0.5);
                state = rollout(&atom.x, &control, game.domain);
            }
            particles.push(Particle { state, control, weight: atom.weight / per_atom as f64 });
        }
    }
    Ok(PathMeasure::new(grid, d, particles))
}

/// Merges particles with bitwise identical start and control.
fn merge_duplicates(eta: &mut PathMeasure) {
    let mut out: Vec<Particle> = Vec::with_capacity(eta.particles.len());
    for p in eta.particles.drain(..) {
        match out.iter_mut().find(|q| q.state.x0 == p.state.x0 && q.control.u == p.control.u) {
            Some(q) => q.weight += p.weight,
            None => out.push(p),
        }
    }
    eta.particles = out;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub exploitability: f64,
    pub min_gap: f64,
    /// `W1(eta_k, E(eta_k))` under the path metric.
    pub fixed_point_residual: f64,
    /// The residual came from the exact flow solver rather than the per-atom coupling bound.
    pub residual_exact: bool,
    pub alpha: f64,
    /// `W1(eta_k, eta_{k+1}) = alpha W1(eta_k, E(eta_k))`.
    pub w1_step: f64,
    pub particles: usize,
    pub pruned_mass: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BudgetAudit {
    pub particles: usize,
    pub violations: usize,
    pub max_sup: f64,
    pub max_lipschitz: f64,
    pub min_distance: f64,
    pub pass: bool,
}

pub fn budget_audit(eta: &PathMeasure, budget: &KBudget) -> BudgetAudit {
    let mut a = BudgetAudit {
        particles: eta.particles.len(),
        violations: 0,
        max_sup: 0.0,
        max_lipschitz: 0.0,
        min_distance: f64::INFINITY,
        pass: true,
    };
    for p in &eta.particles {
        a.max_sup = a.max_sup.max(p.control.sup_norm());
        a.max_lipschitz = a.max_lipschitz.max(p.control.lipschitz());
        a.min_distance = a.min_distance.min(p.state.min_distance);
        if !p.control.within_budget(budget, 0.0) || !p.state.feasible {
            a.violations += 1;
        }
    }
    a.pass = a.violations == 0;
    a
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    /// Mixing steps taken.
    pub iterations: usize,
    /// Iteration whose measure is returned.
    pub selected: usize,
    pub exploitability: f64,
    pub fixed_point: bool,
    pub history: Vec<IterationRecord>,
    pub pruned_mass: f64,
    pub mass_error: f64,
    pub budget: BudgetAudit,
    pub flow: FlowLipschitzReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValueLattice {
    pub times: Vec<f64>,
    pub nodes: Vec<usize>,
    pub points: Vec<Vec<f64>>,
    /// Row-major over `(time, point)`.
    pub values: Vec<f64>,
}

impl ValueLattice {
    pub fn get(&self, ti: usize, pi: usize) -> f64 {
        self.values[ti * self.points.len() + pi]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AtomValue {
    pub x0: Vec<f64>,
    pub mass: f64,
    /// `V(0, x0)`.
    pub value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MildSolution {
    pub m0: StateMeasure,
    pub eta: PathMeasure,
    pub value: ValueLattice,
    /// State marginal at every grid node.
    pub sigma: Vec<StateMeasure>,
    pub atom_values: Vec<AtomValue>,
    pub optimality_tol: f64,
    pub report: SolveReport,
}

/// Evenly spaced node indices from `0` to `n`.
pub fn time_nodes(n: usize, samples: usize) -> Vec<usize> {
    let s = samples.max(2) - 1;
    let mut nodes: Vec<usize> = (0..=s).map(|k| (k * n + s / 2) / s).collect();
    nodes.dedup();
    nodes
}

/// Tensor lattice over the bounding box, restricted to the closed domain.
pub fn lattice_points(domain: &Domain, per_axis: usize) -> Vec<Vec<f64>> {
    let (lo, hi) = domain.bounding_box();
    let d = lo.len();
    let m = per_axis.max(2);
    let total = m.pow(d as u32);
    (0..total)
        .map(|mut k| {
            (0..d)
                .map(|j| {
                    let i = k % m;
                    k /= m;
                    lo[j] + (hi[j] - lo[j]) * i as f64 / (m - 1) as f64
                })
                .collect::<Vec<f64>>()
        })
        .filter(|x| domain.signed_distance(x) >= 0.0)
        .collect()
}

/// `V(t, x)` by best responses on the tail horizons of `eta`.
pub fn value_function(eta: &PathMeasure, nodes: &[usize], points: &[Vec<f64>], game: &Game) -> Result<ValueLattice, EquilibriumError> {
    let env = MeanFieldEnv::new(eta, game.model, game.terminal);
    let n = eta.grid.n;
    let jobs: Vec<(usize, usize)> = (0..nodes.len()).flat_map(|t| (0..points.len()).map(move |p| (t, p))).collect();
    let values = jobs
        .par_iter()
        .map(|&(ti, pi)| {
            let x = &points[pi];
            if nodes[ti] >= n {
                return Ok(game.terminal.value(x, &env.terminal_stats));
            }
            let tail = env.tail(nodes[ti]);
            best_response_env(x, &tail, &game.budget, game.model, game.terminal, game.domain, game.br, None)
                .map(|br| br.cost)
                .map_err(|source| EquilibriumError::Solver { atom: pi, source })
        })
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(ValueLattice {
        times: nodes.iter().map(|&i| eta.grid.time(i)).collect(),
        nodes: nodes.to_vec(),
        points: points.to_vec(),
        values,
    })
}

pub fn sigma_flow(eta: &PathMeasure) -> Vec<StateMeasure> {
    (0..eta.grid.nodes()).map(|i| state_marginal(&push_forward_at_node(eta, i))).collect()
}

fn fixed_point_residual(eta: &PathMeasure, img: &PathMeasure, atoms: &[AtomGap]) -> (f64, bool) {
    if eta.particles.len() * img.particles.len() <= EXACT_W1_LIMIT {
        if let Ok(w) = wasserstein1(eta, img, W1Backend::Flow) {
            return (w, true);
        }
    }
    // coupling that moves each conditional onto its own best response
    let conds = disintegrate_by_initial(eta);
    let mut bound = 0.0;
    for (c, a) in conds.iter().zip(atoms) {
        let target = Particle {
            state: a.state.clone().expect("sweep state"),
            control: a.control.clone().expect("sweep control"),
            weight: 1.0,
        };
        for p in &c.measure.particles {
            bound += c.mass * p.weight * crate::measures::path_distance(p, &target);
        }
    }
    (bound, false)
}

/// Damped iteration `eta <- (1 - alpha_k) eta + alpha_k E(eta)` from the
/// measure built by [`initial_measure`], stopped by exploitability.
pub fn damped_fixed_point_solve(config: &EquilibriumConfig, m0: &StateMeasure, game: &Game) -> Result<MildSolution, EquilibriumError> {
    config.validate()?;
    let grid = TimeGrid::new(game.model.horizon(), config.steps);
    let eta0 = initial_measure(m0, grid, config.particles_per_atom, config.seed, game)?;
    solve_from(config, m0, eta0, game)
}

/// [`damped_fixed_point_solve`] from a given starting measure.
pub fn solve_from(config: &EquilibriumConfig, m0: &StateMeasure, eta0: PathMeasure, game: &Game) -> Result<MildSolution, EquilibriumError> {
    config.validate()?;
    let mut eta = eta0;
    let mut history = Vec::new();
    let mut pruned_total = 0.0;
    let mut best: Option<(f64, usize, PathMeasure, Exploitability, f64)> = None;
    let mut converged = false;
    let mut k = 0;
    loop {
        let results = gaps(&eta, game);
        if let Some((atom, Err(source))) = results.iter().enumerate().find(|(_, r)| r.is_err()) {
            return Err(EquilibriumError::Solver { atom, source: source.clone() });
        }
        let ex = summarize(results);
        let img = image(&eta, &ex.atoms);
        let (residual, exact) = fixed_point_residual(&eta, &img, &ex.atoms);
        let record = IterationRecord {
            iteration: k,
            exploitability: ex.value,
            min_gap: ex.min_gap,
            fixed_point_residual: residual,
            residual_exact: exact,
            alpha: 0.0,
            w1_step: 0.0,
            particles: eta.particles.len(),
            pruned_mass: 0.0,
        };
        history.push(record);
        let improves = best.as_ref().is_none_or(|b| ex.value < b.0);
        let done = ex.value < config.exploitability_tol;
        if improves || done {
            best = Some((ex.value, k, eta.clone(), ex.clone(), residual));
        }
        if done {
            converged = true;
            break;
        }
        if k >= config.max_iterations {
            break;
        }
        let alpha = config.damping.alpha(k);
        let mut next = eta.mix(&img, alpha);
        merge_duplicates(&mut next);
        let pruned = next.prune(PRUNE_THRESHOLD);
        pruned_total += pruned;
        let last = history.last_mut().expect("record");
        last.alpha = alpha;
        last.w1_step = alpha * residual;
        last.pruned_mass = pruned;
        eta = next;
        k += 1;
    }
    let (value, selected, eta, ex, residual) = best.expect("at least one sweep");
    let sol = extract(config, m0, eta, &ex, game, SolveMeta {
        converged,
        iterations: k,
        selected,
        exploitability: value,
        fixed_point: residual < config.w1_tol,
        history,
        pruned_mass: pruned_total,
    })?;
    if converged {
        Ok(sol)
    } else {
        Err(EquilibriumError::NotConverged(Box::new(sol)))
    }
}

struct SolveMeta {
    converged: bool,
    iterations: usize,
    selected: usize,
    exploitability: f64,
    fixed_point: bool,
    history: Vec<IterationRecord>,
    pruned_mass: f64,
}

fn extract(config: &EquilibriumConfig, m0: &StateMeasure, eta: PathMeasure, ex: &Exploitability, game: &Game, meta: SolveMeta) -> Result<MildSolution, EquilibriumError> {
    let nodes = time_nodes(eta.grid.n, config.value_grid.time_samples);
    let points = lattice_points(game.domain, config.value_grid.points_per_axis);
    let value = value_function(&eta, &nodes, &points, game)?;
    let sigma = sigma_flow(&eta);
    let atom_values = ex
        .atoms
        .iter()
        .map(|a| AtomValue { x0: a.x0.clone(), mass: a.mass, value: a.value })
        .collect();
    let report = SolveReport {
        converged: meta.converged,
        iterations: meta.iterations,
        selected: meta.selected,
        exploitability: meta.exploitability,
        fixed_point: meta.fixed_point,
        history: meta.history,
        pruned_mass: meta.pruned_mass,
        mass_error: (eta.mass() - 1.0).abs(),
        budget: budget_audit(&eta, &game.budget),
        flow: flow_lipschitz_check(&eta, &game.budget, FLOW_PAIRS, config.seed),
    };
    Ok(MildSolution {
        m0: m0.clone(),
        eta,
        value,
        sigma,
        atom_values,
        optimality_tol: config.optimality_tol,
        report,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ItemCheck {
    pub item: String,
    pub pass: bool,
    /// Largest observed discrepancy.
    pub worst: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MildReport {
    pub items: Vec<ItemCheck>,
    /// Largest `I^{x0}[u; eta] - V(0, x0)` over support particles.
    pub max_gap: f64,
    pub all_pass: bool,
}

fn same_atoms(a: &StateMeasure, b: &StateMeasure) -> (bool, f64) {
    if a.atoms.len() != b.atoms.len() {
        return (false, f64::INFINITY);
    }
    let mut worst: f64 = 0.0;
    for (p, q) in a.atoms.iter().zip(&b.atoms) {
        worst = worst.max(dist(&p.x, &q.x)).max((p.weight - q.weight).abs());
    }
    (worst <= 1e-12, worst)
}

fn grouped(mu: &StateMeasure) -> StateMeasure {
    let mut atoms: Vec<StateAtom> = Vec::new();
    for a in &mu.atoms {
        match atoms.iter_mut().find(|b| b.x.iter().zip(&a.x).all(|(u, v)| (u - v).abs() <= SNAP)) {
            Some(b) => b.weight += a.weight,
            None => atoms.push(a.clone()),
        }
    }
    StateMeasure { atoms }
}

/// Checks the initial condition, the marginal identity and per-particle optimality.
pub fn verify_mild_solution(sol: &MildSolution, game: &Game) -> MildReport {
    let mut items = Vec::new();

    let (ok, worst) = sol
        .sigma
        .first()
        .map(|s0| same_atoms(&grouped(s0), &grouped(&sol.m0)))
        .unwrap_or((false, f64::INFINITY));
    items.push(ItemCheck {
        item: "(i) sigma_0 = m0".into(),
        pass: ok,
        worst,
        detail: format!("{} atoms", sol.m0.atoms.len()),
    });

    let fresh = sigma_flow(&sol.eta);
    let mut ok = fresh.len() == sol.sigma.len();
    let mut worst: f64 = if ok { 0.0 } else { f64::INFINITY };
    let mut bad_nodes = 0;
    for (a, b) in fresh.iter().zip(&sol.sigma) {
        let (same, w) = same_atoms(a, b);
        worst = worst.max(w);
        if !same {
            bad_nodes += 1;
            ok = false;
        }
    }
    items.push(ItemCheck {
        item: "(ii) sigma_t = state marginal of eta at t".into(),
        pass: ok,
        worst,
        detail: format!("{bad_nodes} of {} nodes differ", sol.sigma.len()),
    });

    let env = MeanFieldEnv::new(&sol.eta, game.model, game.terminal);
    let mut max_gap = f64::NEG_INFINITY;
    let mut min_gap = f64::INFINITY;
    let mut unmatched = 0;
    for p in &sol.eta.particles {
        let x0 = &p.state.x0;
        let Some(v) = sol.atom_values.iter().find(|a| a.x0.iter().zip(x0).all(|(u, w)| (u - w).abs() <= SNAP)) else {
            unmatched += 1;
            continue;
        };
        let cost = env.cost(x0, &p.control, game.model, game.terminal, game.domain);
        max_gap = max_gap.max(cost - v.value);
        min_gap = min_gap.min(cost - v.value);
    }
    let ok = unmatched == 0 && max_gap <= sol.optimality_tol && min_gap >= -sol.optimality_tol;
    items.push(ItemCheck {
        item: "(iii) support particles attain V(0, x0)".into(),
        pass: ok,
        worst: max_gap,
        detail: format!("min gap {min_gap:e}, tolerance {:e}, {unmatched} particles without an atom value", sol.optimality_tol),
    });

    let all_pass = items.iter().all(|i| i.pass);
    MildReport { items, max_gap, all_pass }
}
