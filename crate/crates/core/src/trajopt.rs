//! Discretized controls and trajectories, the cost functional, constrained
//! best responses and the Euler-Lagrange certificate.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::KBudget;
use crate::geometry::Domain;
use crate::lagrangian::{dp_hamiltonian, Lagrangian, Stats, TerminalCost};
use crate::numdiff;
use crate::measures::{push_forward_at_node, state_marginal, PathMeasure};
use crate::vecops::{dist, dot, norm, normalize};

/// Uniform grid of `n + 1` nodes on `[0, t_final]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_final: f64,
    pub n: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, n: usize) -> Self {
        assert!(t_final > 0.0 && n > 0, "degenerate time grid");
        TimeGrid { t_final, n }
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.n as f64
    }

    pub fn nodes(&self) -> usize {
        self.n + 1
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.n {
            self.t_final
        } else {
            i as f64 * self.dt()
        }
    }

    /// Trapezoid weight of node `i`.
    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 || i == self.n {
            0.5 * self.dt()
        } else {
            self.dt()
        }
    }

    /// Cell index and fraction for linear interpolation at `t`.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let s = (t / self.dt()).clamp(0.0, self.n as f64);
        let i = (s.floor() as usize).min(self.n - 1);
        (i, s - i as f64)
    }
}

/// Node samples of a vector-valued path, flattened row-major.
fn interp(data: &[f64], d: usize, grid: &TimeGrid, t: f64) -> Vec<f64> {
    let (i, f) = grid.locate(t);
    (0..d)
        .map(|k| (1.0 - f) * data[i * d + k] + f * data[(i + 1) * d + k])
        .collect()
}

/// Velocity samples `u_i` on a uniform grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    pub grid: TimeGrid,
    pub dim: usize,
    pub u: Vec<f64>,
    pub budget: Option<KBudget>,
}

impl ControlPath {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        ControlPath { grid, dim, u: vec![0.0; grid.nodes() * dim], budget: None }
    }

    pub fn constant(grid: TimeGrid, v: &[f64]) -> Self {
        let u = (0..grid.nodes()).flat_map(|_| v.iter().copied()).collect();
        ControlPath { grid, dim: v.len(), u, budget: None }
    }

    pub fn from_fn(grid: TimeGrid, dim: usize, f: impl Fn(f64) -> Vec<f64>) -> Self {
        let u = (0..grid.nodes()).flat_map(|i| f(grid.time(i))).collect();
        ControlPath { grid, dim, u, budget: None }
    }

    pub fn with_budget(mut self, budget: KBudget) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn len(&self) -> usize {
        self.grid.nodes()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.u[i * self.dim..(i + 1) * self.dim]
    }

    pub fn node_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.u[i * self.dim..(i + 1) * self.dim]
    }

    pub fn at_time(&self, t: f64) -> Vec<f64> {
        interp(&self.u, self.dim, &self.grid, t)
    }

    /// `max_i |u_i|`.
    pub fn sup_norm(&self) -> f64 {
        (0..self.len()).map(|i| crate::vecops::norm(self.node(i))).fold(0.0, f64::max)
    }

    /// `max_i |u_{i+1} - u_i| / dt`.
    pub fn lipschitz(&self) -> f64 {
        let dt = self.grid.dt();
        (0..self.grid.n)
            .map(|i| crate::vecops::dist(self.node(i + 1), self.node(i)) / dt)
            .fold(0.0, f64::max)
    }

    /// Checks `|u_i| <= K1 + tol` and `|u_{i+1} - u_i| <= K2 dt + tol`.
    pub fn within_budget(&self, budget: &KBudget, tol: f64) -> bool {
        let dt = self.grid.dt();
        (0..self.len()).all(|i| crate::vecops::norm(self.node(i)) <= budget.k1 + tol)
            && (0..self.grid.n)
                .all(|i| crate::vecops::dist(self.node(i + 1), self.node(i)) <= budget.k2 * dt + tol)
    }
}

/// Node states of a rolled-out trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatePath {
    pub grid: TimeGrid,
    pub dim: usize,
    pub x0: Vec<f64>,
    pub x: Vec<f64>,
    pub feasible: bool,
    pub min_distance: f64,
}

impl StatePath {
    pub fn len(&self) -> usize {
        self.grid.nodes()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn at_time(&self, t: f64) -> Vec<f64> {
        interp(&self.x, self.dim, &self.grid, t)
    }

    pub fn endpoint(&self) -> &[f64] {
        self.node(self.grid.n)
    }
}

/// Feasibility tolerance on `min_i b(x_i)`.
pub const FEAS_TOL: f64 = 1e-9;

/// Trapezoidal integration `x_{i+1} = x_i + dt (u_i + u_{i+1}) / 2`.
pub fn rollout(x0: &[f64], u: &ControlPath, domain: &Domain) -> StatePath {
    let d = u.dim;
    let dt = u.grid.dt();
    let nodes = u.len();
    let mut x = vec![0.0; nodes * d];
    x[..d].copy_from_slice(x0);
    for i in 0..nodes - 1 {
        for k in 0..d {
            x[(i + 1) * d + k] = x[i * d + k] + 0.5 * dt * (u.u[i * d + k] + u.u[(i + 1) * d + k]);
        }
    }
    let min_distance = (0..nodes)
        .map(|i| domain.signed_distance(&x[i * d..(i + 1) * d]))
        .fold(f64::INFINITY, f64::min);
    StatePath {
        grid: u.grid,
        dim: d,
        x0: x0.to_vec(),
        x,
        feasible: min_distance >= -FEAS_TOL,
        min_distance,
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajError {
    #[error("control grid does not match the path-measure grid")]
    GridMismatch,
    #[error("initial point lies outside the closed domain (b = {0:e})")]
    InfeasibleStart(f64),
    #[error("lattice search needs {0:e} evaluations (limit 1e8)")]
    Combinatorics(f64),
    #[error("lattice jumps exceed the control Lipschitz budget")]
    LatticeExceedsBudget,
}

/// Per-node measure statistics of a frozen path measure.
#[derive(Clone, Debug)]
pub struct MeanFieldEnv {
    pub grid: TimeGrid,
    /// Absolute time of node 0.
    pub t0: f64,
    pub stats: Vec<Stats>,
    pub terminal_stats: Stats,
}

impl MeanFieldEnv {
    pub fn new(eta: &PathMeasure, model: &dyn Lagrangian, terminal: &dyn TerminalCost) -> Self {
        let stats = (0..eta.grid.nodes())
            .map(|i| model.summarize(&push_forward_at_node(eta, i)))
            .collect();
        let terminal_stats = terminal.summarize(&state_marginal(&push_forward_at_node(eta, eta.grid.n)));
        MeanFieldEnv { grid: eta.grid, t0: 0.0, stats, terminal_stats }
    }

    /// Restriction to nodes `start..=n`, re-based at `t0 + start dt`.
    pub fn tail(&self, start: usize) -> Self {
        assert!(start < self.grid.n, "tail needs at least one cell");
        MeanFieldEnv {
            grid: TimeGrid::new(self.grid.t_final - self.grid.time(start), self.grid.n - start),
            t0: self.t0 + self.grid.time(start),
            stats: self.stats[start..].to_vec(),
            terminal_stats: self.terminal_stats.clone(),
        }
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + self.grid.time(i)
    }

    /// Trapezoidal cost of `u` from `x0`.
    pub fn cost(&self, x0: &[f64], u: &ControlPath, model: &dyn Lagrangian, terminal: &dyn TerminalCost, domain: &Domain) -> f64 {
        let x = rollout(x0, u, domain);
        self.cost_of(&x, u, model, terminal)
    }

    pub fn cost_of(&self, x: &StatePath, u: &ControlPath, model: &dyn Lagrangian, terminal: &dyn TerminalCost) -> f64 {
        let mut total = 0.0;
        for i in 0..u.len() {
            total += self.grid.weight(i) * model.value(self.time(i), x.node(i), u.node(i), &self.stats[i]);
        }
        total + terminal.value(x.endpoint(), &self.terminal_stats)
    }
}

/// `I^{x0}[u; eta]`.
pub fn total_cost(
    x0: &[f64],
    u: &ControlPath,
    eta: &PathMeasure,
    model: &dyn Lagrangian,
    terminal: &dyn TerminalCost,
    domain: &Domain,
) -> Result<f64, TrajError> {
    if eta.grid != u.grid {
        return Err(TrajError::GridMismatch);
    }
    Ok(MeanFieldEnv::new(eta, model, terminal).cost(x0, u, model, terminal, domain))
}

/// Euclidean projection onto `{|u_i| <= K1, |u_{i+1} - u_i| <= K2 dt}` by
/// Dykstra's algorithm over node balls and even/odd pair sets, followed by
/// a uniform shrink that makes membership exact.
pub fn project_budget(u: &mut ControlPath, budget: &KBudget) {
    let d = u.dim;
    let n = u.len();
    let r = budget.k2 * u.grid.dt();
    let inside = |u: &ControlPath| u.within_budget(budget, 0.0);
    if inside(u) {
        return;
    }
    let ball = |z: &mut [f64]| {
        for i in 0..n {
            let s = &mut z[i * d..(i + 1) * d];
            let nz = norm(s);
            if nz > budget.k1 {
                s.iter_mut().for_each(|c| *c *= budget.k1 / nz);
            }
        }
    };
    let pairs = |z: &mut [f64], parity: usize| {
        let mut i = parity;
        while i + 1 < n {
            let (a, b) = z[i * d..(i + 2) * d].split_at_mut(d);
            let gap = dist(a, b);
            if gap > r {
                let shrink = 0.5 * (1.0 - r / gap);
                for k in 0..d {
                    let delta = shrink * (a[k] - b[k]);
                    a[k] -= delta;
                    b[k] += delta;
                }
            }
            i += 2;
        }
    };
    let mut z = u.u.clone();
    let len = z.len();
    let mut incr = [vec![0.0; len], vec![0.0; len], vec![0.0; len]];
    for _ in 0..500 {
        let before = z.clone();
        for (s, inc) in incr.iter_mut().enumerate() {
            let mut y: Vec<f64> = z.iter().zip(inc.iter()).map(|(a, b)| a + b).collect();
            match s {
                0 => ball(&mut y),
                1 => pairs(&mut y, 0),
                _ => pairs(&mut y, 1),
            }
            for k in 0..len {
                inc[k] = z[k] + inc[k] - y[k];
            }
            z = y;
        }
        if dist(&before, &z) < 1e-13 * (1.0 + norm(&z)) {
            break;
        }
    }
    u.u = z;
    let sup = u.sup_norm();
    let lip = u.lipschitz() * u.grid.dt();
    let mut scale: f64 = 1.0;
    if sup > budget.k1 {
        scale = scale.min(budget.k1 / sup);
    }
    if lip > r {
        scale = scale.min(r / lip);
    }
    if scale < 1.0 {
        u.u.iter_mut().for_each(|c| *c *= scale);
    }
    while !inside(u) {
        u.u.iter_mut().for_each(|c| *c *= 1.0 - 1e-14);
    }
}

pub const NEWTON_MAX_DIM: usize = 1600;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BrOptions {
    pub starts: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub penalties: Vec<f64>,
    pub multiplier_updates: usize,
    /// Further updates at the last penalty while the violation exceeds `violation_tol`.
    pub extra_updates: usize,
    pub violation_tol: f64,
    /// Use projected Newton steps when the control has at most `NEWTON_MAX_DIM` entries.
    pub newton: bool,
    /// Required `b(x_i) >= margin` inside the solver.
    pub margin: f64,
}

impl Default for BrOptions {
    fn default() -> Self {
        BrOptions {
            starts: 3,
            seed: 0,
            max_iters: 4000,
            tol: 1e-9,
            penalties: vec![1e2, 1e3, 1e4],
            multiplier_updates: 2,
            extra_updates: 20,
            violation_tol: 1e-10,
            newton: true,
            margin: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BestResponse {
    pub control: ControlPath,
    pub state: StatePath,
    pub cost: f64,
    /// `|P(u - grad F) - u|` of the last augmented subproblem.
    pub stationarity: f64,
    pub iterations: usize,
    /// Line search failed before the tolerance was met.
    pub stalled: bool,
    /// Blend factor toward `u = 0` used to restore feasibility.
    pub repair: f64,
    pub start_costs: Vec<f64>,
}

struct Problem<'a> {
    x0: &'a [f64],
    env: &'a MeanFieldEnv,
    model: &'a dyn Lagrangian,
    terminal: &'a dyn TerminalCost,
    domain: &'a Domain,
    budget: KBudget,
    rho: f64,
    mu: Vec<f64>,
    margin: f64,
}

impl Problem<'_> {
    /// Augmented objective and its gradient via suffix sums of `dF/dx_m`.
    fn eval(&self, u: &ControlPath, grad: &mut [f64]) -> f64 {
        let d = u.dim;
        let n = u.len();
        let dt = u.grid.dt();
        let x = rollout(self.x0, u, self.domain);
        let mut gx = vec![0.0; n * d];
        let mut total = 0.0;
        for i in 0..n {
            let w = self.env.grid.weight(i);
            let gxi = &mut gx[i * d..(i + 1) * d];
            let gv = &mut grad[i * d..(i + 1) * d];
            total += w * self.model.eval(self.env.time(i), x.node(i), u.node(i), &self.env.stats[i], gxi, gv);
            gxi.iter_mut().for_each(|c| *c *= w);
            gv.iter_mut().for_each(|c| *c *= w);
            if i > 0 {
                let g = self.margin - self.domain.signed_distance(x.node(i));
                let act = self.mu[i] + self.rho * g;
                total += (act.max(0.0).powi(2) - self.mu[i] * self.mu[i]) / (2.0 * self.rho);
                if act > 0.0 {
                    let nb = self.domain.distance_gradient(x.node(i));
                    for k in 0..d {
                        gxi[k] -= act * nb[k];
                    }
                }
            }
        }
        let last = n - 1;
        total += self.terminal.value(x.endpoint(), &self.env.terminal_stats);
        let mut gt = vec![0.0; d];
        self.terminal.grad(x.endpoint(), &self.env.terminal_stats, &mut gt);
        for k in 0..d {
            gx[last * d + k] += gt[k];
        }
        // suffix[j] = sum_{m >= j} dF/dx_m
        let mut suffix = vec![0.0; (n + 1) * d];
        for j in (0..n).rev() {
            for k in 0..d {
                suffix[j * d + k] = suffix[(j + 1) * d + k] + gx[j * d + k];
            }
        }
        for i in 0..n {
            for k in 0..d {
                let mut s = suffix[(i + 1) * d + k];
                if i >= 1 {
                    s += suffix[i * d + k];
                }
                grad[i * d + k] += 0.5 * dt * s;
            }
        }
        total
    }

    fn project(&self, u: &mut ControlPath) {
        project_budget(u, &self.budget);
    }

    fn stationarity(&self, u: &ControlPath, g: &[f64]) -> f64 {
        let mut y = u.clone();
        for (a, b) in y.u.iter_mut().zip(g) {
            *a -= b;
        }
        self.project(&mut y);
        dist(&y.u, &u.u)
    }

    /// Dense u-space Hessian of the augmented objective. The measure is
    /// frozen, so only the chain through `x_m = x0 + sum_j c_mj u_j` enters.
    fn hessian(&self, u: &ControlPath) -> DMatrix<f64> {
        let d = u.dim;
        let n = u.len();
        let last = n - 1;
        let dt = u.grid.dt();
        let dd = d * d;
        let x = rollout(self.x0, u, self.domain);
        let mut hvv = vec![0.0; n * dd];
        let mut hvx = vec![0.0; n * dd];
        let mut bx = vec![0.0; n * dd];
        for m in 0..n {
            let (t, xm, um, s) = (self.env.time(m), x.node(m), u.node(m), &self.env.stats[m]);
            let w = self.env.grid.weight(m);
            let a = self.model.hess_vv(t, xm, um, s);
            let c = self.model.hess_xv(t, xm, um, s);
            let mut b = numdiff::jacobian(
                |y| {
                    let mut g = vec![0.0; d];
                    self.model.grad_x(t, y, um, s, &mut g);
                    g
                },
                xm,
                d,
            ) * w;
            if m == last {
                b += numdiff::jacobian(
                    |y| {
                        let mut g = vec![0.0; d];
                        self.terminal.grad(y, &self.env.terminal_stats, &mut g);
                        g
                    },
                    xm,
                    d,
                );
            }
            if m > 0 {
                let act = self.mu[m] + self.rho * (self.margin - self.domain.signed_distance(xm));
                if act > 0.0 {
                    let nb = DVector::from_vec(self.domain.distance_gradient(xm));
                    let curv = numdiff::jacobian(|y| self.domain.distance_gradient(y), xm, d);
                    b += &nb * nb.transpose() * self.rho - curv * act;
                }
            }
            for r in 0..d {
                for q in 0..d {
                    hvv[m * dd + r * d + q] = w * a[(r, q)];
                    hvx[m * dd + r * d + q] = w * c[(r, q)];
                    bx[m * dd + r * d + q] = 0.5 * (b[(r, q)] + b[(q, r)]);
                }
            }
        }
        // tails[k] = dt^2 (B_k / 2 + sum_{m > k} B_m), diag[k] the diagonal analogue
        let mut suffix = vec![0.0; (n + 1) * dd];
        for m in (0..n).rev() {
            for e in 0..dd {
                suffix[m * dd + e] = suffix[(m + 1) * dd + e] + bx[m * dd + e];
            }
        }
        let dt2 = dt * dt;
        let size = n * d;
        let mut h = vec![0.0; size * size];
        let mut add = |row: usize, col: usize, v: f64| h[row * size + col] += v;
        for k in 0..n {
            for r in 0..d {
                for q in 0..d {
                    let e = r * d + q;
                    let diag = if k == 0 {
                        0.25 * dt2 * suffix[dd + e]
                    } else {
                        dt2 * (0.25 * bx[k * dd + e] + suffix[(k + 1) * dd + e])
                    };
                    add(k * d + r, k * d + q, diag + hvv[k * dd + e]);
                    if k == 0 {
                        continue;
                    }
                    let tail = dt2 * (0.5 * bx[k * dd + e] + suffix[(k + 1) * dd + e]);
                    let cross = hvx[k * dd + e];
                    for j in 0..k {
                        let alpha = if j == 0 { 0.5 } else { 1.0 };
                        // block (j, k) and its transpose, plus X_k c(k, j) at (k, j)
                        let v = alpha * tail + alpha * dt * cross;
                        add(j * d + q, k * d + r, v);
                        add(k * d + r, j * d + q, v);
                    }
                    let own = 0.5 * dt * cross;
                    add(k * d + r, k * d + q, own);
                    add(k * d + q, k * d + r, own);
                }
            }
        }
        DMatrix::from_row_slice(size, size, &h)
    }

    /// Newton direction `-(H + tau I)^{-1} g`, shifting until `H + tau I` is positive definite.
    fn newton_step(&self, u: &ControlPath, g: &[f64]) -> Option<Vec<f64>> {
        let h = self.hessian(u);
        let len = g.len();
        let scale = (0..len).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
        let mut tau = 0.0;
        for _ in 0..30 {
            let mut m = h.clone();
            for i in 0..len {
                m[(i, i)] += tau;
            }
            if let Some(ch) = m.cholesky() {
                let sol = ch.solve(&DVector::from_iterator(len, g.iter().map(|v| -v)));
                return Some(sol.iter().copied().collect());
            }
            tau = if tau == 0.0 { 1e-10 * scale } else { 10.0 * tau };
        }
        None
    }

    /// Projected Newton iterations with a spectral projected gradient
    /// fallback, both under an Armijo search on the projected arc.
    fn solve(&self, u: &mut ControlPath, max_iters: usize, tol: f64, newton: bool) -> (f64, f64, usize, bool) {
        self.project(u);
        let len = u.u.len();
        let mut g = vec![0.0; len];
        let mut f = self.eval(u, &mut g);
        let mut history = vec![f];
        let mut pg = self.stationarity(u, &g);
        let mut alpha = if pg > 0.0 { (1.0 / pg).clamp(1e-10, 1e10) } else { 1.0 };
        let mut gnew = vec![0.0; len];
        let mut iters = 0;
        let mut stalled = false;
        while iters < max_iters && pg > tol {
            iters += 1;
            let mut accepted = None;
            if newton {
                if let Some(step) = self.newton_step(u, &g) {
                    let mut trial = u.clone();
                    for (a, b) in trial.u.iter_mut().zip(&step) {
                        *a += b;
                    }
                    self.project(&mut trial);
                    let dir: Vec<f64> = trial.u.iter().zip(&u.u).map(|(a, b)| a - b).collect();
                    let slope = dot(&dir, &g);
                    if slope < 0.0 {
                        accepted = self.armijo(u, &dir, slope, f, &mut gnew).filter(|(c, _)| {
                            // reject vanishing steps; they only stall the iteration
                            dist(&c.u, &u.u) >= 1e-3 * norm(&dir)
                        });
                        if accepted.is_none() {
                            // below rounding in f: accept a full step that reduces stationarity
                            let fc = self.eval(&trial, &mut gnew);
                            if fc <= f + 16.0 * f64::EPSILON * f.abs().max(1.0) && self.stationarity(&trial, &gnew) < 0.5 * pg {
                                accepted = Some((trial, fc));
                            }
                        }
                    }
                }
            }
            if accepted.is_none() {
                let mut trial = u.clone();
                for (a, b) in trial.u.iter_mut().zip(&g) {
                    *a -= alpha * b;
                }
                self.project(&mut trial);
                let dir: Vec<f64> = trial.u.iter().zip(&u.u).map(|(a, b)| a - b).collect();
                let slope = dot(&dir, &g);
                let f_ref = history.iter().cloned().fold(f64::MIN, f64::max);
                accepted = self.armijo(u, &dir, slope, f_ref, &mut gnew);
            }
            let Some((cand, fc)) = accepted else {
                stalled = true;
                break;
            };
            let s: Vec<f64> = cand.u.iter().zip(&u.u).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            alpha = if sy > 0.0 {
                (if iters % 2 == 0 { dot(&s, &s) / sy } else { sy / dot(&y, &y) }).clamp(1e-10, 1e10)
            } else {
                1e10
            };
            *u = cand;
            f = fc;
            std::mem::swap(&mut g, &mut gnew);
            history.push(f);
            if history.len() > 10 {
                history.remove(0);
            }
            pg = self.stationarity(u, &g);
        }
        (f, pg, iters, stalled)
    }

    fn armijo(&self, u: &ControlPath, dir: &[f64], slope: f64, f_ref: f64, gnew: &mut [f64]) -> Option<(ControlPath, f64)> {
        let mut lambda = 1.0;
        for _ in 0..60 {
            let mut cand = u.clone();
            for (c, dd) in cand.u.iter_mut().zip(dir) {
                *c += lambda * dd;
            }
            let fc = self.eval(&cand, gnew);
            if fc <= f_ref + 1e-4 * lambda * slope {
                return Some((cand, fc));
            }
            lambda *= 0.5;
        }
        None
    }
}

fn smooth_start(grid: TimeGrid, d: usize, rng: &mut ChaCha8Rng, amplitude: f64) -> ControlPath {
    let coeffs: Vec<f64> = (0..3 * d).map(|_| rng.gen_range(-amplitude..amplitude)).collect();
    ControlPath::from_fn(grid, d, |t| {
        (0..d)
            .map(|k| {
                (0..3)
                    .map(|j| coeffs[j * d + k] * (j as f64 * std::f64::consts::PI * t / grid.t_final).cos())
                    .sum()
            })
            .collect()
    })
}

/// Smallest blend `u <- (1 - lambda) u` restoring `min b >= -FEAS_TOL`; the domains
/// are convex, so `lambda = 1` (standing still) is always feasible.
fn repair(x0: &[f64], u: &mut ControlPath, domain: &Domain) -> f64 {
    if rollout(x0, u, domain).feasible {
        return 0.0;
    }
    let orig = u.u.clone();
    let scaled = |lam: f64| orig.iter().map(|c| (1.0 - lam) * c).collect::<Vec<_>>();
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        u.u = scaled(mid);
        if rollout(x0, u, domain).feasible {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    u.u = scaled(hi);
    hi
}

fn lexicographic_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Constrained best response over the budgeted class on `env`'s grid.
#[allow(clippy::too_many_arguments)]
pub fn best_response_env(
    x0: &[f64],
    env: &MeanFieldEnv,
    budget: &KBudget,
    model: &dyn Lagrangian,
    terminal: &dyn TerminalCost,
    domain: &Domain,
    opts: &BrOptions,
    warm: Option<&ControlPath>,
) -> Result<BestResponse, TrajError> {
    let b0 = domain.signed_distance(x0);
    if b0 < -FEAS_TOL {
        return Err(TrajError::InfeasibleStart(b0));
    }
    let d = model.dim();
    let grid = env.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![warm.cloned().unwrap_or_else(|| ControlPath::zeros(grid, d))];
    for _ in 1..opts.starts.max(1) {
        let mut s = smooth_start(grid, d, &mut rng, 0.5 * domain.diameter() / grid.t_final);
        while rollout(x0, &s, domain).min_distance < 0.0 && s.sup_norm() > 1e-12 {
            s.u.iter_mut().for_each(|c| *c *= 0.5);
        }
        starts.push(s);
    }
    let mut best: Option<BestResponse> = None;
    let mut start_costs = Vec::new();
    for start in starts {
        let mut u = start;
        u.grid = grid;
        let mut prob = Problem {
            x0,
            env,
            model,
            terminal,
            domain,
            budget: *budget,
            rho: opts.penalties[0],
            mu: vec![0.0; grid.nodes()],
            margin: opts.margin,
        };
        let (mut pg, mut iters, mut stalled) = (f64::INFINITY, 0, false);
        let schedule = opts.penalties.iter().flat_map(|&r| std::iter::repeat_n(r, opts.multiplier_updates.max(1)));
        let last = *opts.penalties.last().expect("penalty schedule");
        let extra = std::iter::repeat_n(last, opts.extra_updates);
        let main_len = opts.penalties.len() * opts.multiplier_updates.max(1);
        for (step, rho) in schedule.chain(extra).enumerate() {
            prob.rho = rho;
            let newton = opts.newton && u.u.len() <= NEWTON_MAX_DIM;
            let (_, p, it, st) = prob.solve(&mut u, opts.max_iters, opts.tol, newton);
            pg = p;
            iters += it;
            stalled = st;
            let x = rollout(x0, &u, domain);
            let mut violation: f64 = 0.0;
            for i in 1..grid.nodes() {
                let b = domain.signed_distance(x.node(i));
                violation = violation.max(opts.margin - b);
                prob.mu[i] = (prob.mu[i] + rho * (prob.margin - b)).max(0.0);
            }
            if rho == last && violation < opts.violation_tol {
                break;
            }
            if step + 1 >= main_len && violation > 0.0 {
                // tighten the working margin by the residual violation
                prob.margin = (prob.margin + violation).min(opts.margin + 1e-8);
            }
        }
        let lam = repair(x0, &mut u, domain);
        let state = rollout(x0, &u, domain);
        let cost = env.cost_of(&state, &u, model, terminal);
        start_costs.push(cost);
        let better = match &best {
            None => true,
            Some(b) => cost < b.cost - 1e-12 || ((cost - b.cost).abs() <= 1e-12 && lexicographic_less(&u.u, &b.control.u)),
        };
        if better {
            best = Some(BestResponse {
                control: u.with_budget(*budget),
                state,
                cost,
                stationarity: pg,
                iterations: iters,
                stalled,
                repair: lam,
                start_costs: Vec::new(),
            });
        }
    }
    let mut best = best.expect("at least one start");
    best.start_costs = start_costs;
    Ok(best)
}

/// Best response of an agent starting at `x0` against `eta`.
#[allow(clippy::too_many_arguments)]
pub fn best_response(
    x0: &[f64],
    eta: &PathMeasure,
    budget: &KBudget,
    model: &dyn Lagrangian,
    terminal: &dyn TerminalCost,
    domain: &Domain,
    opts: &BrOptions,
) -> Result<BestResponse, TrajError> {
    let env = MeanFieldEnv::new(eta, model, terminal);
    best_response_env(x0, &env, budget, model, terminal, domain, opts, None)
}

/// Residuals of the costate system along a discrete path.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ElResidual {
    /// Reconstructed costate, flattened by node.
    pub p: Vec<f64>,
    /// `|u_i - v*(t_i, x_i, -p_i)|` per node.
    pub xdot: Vec<f64>,
    /// Per cell; tangential part only on active cells.
    pub pdot: Vec<f64>,
    pub active: Vec<bool>,
    /// Normal coefficient per cell (zero on inactive cells).
    pub lambda_hat: Vec<f64>,
    pub beta_hat: f64,
    pub terminal: f64,
    pub lip_p: f64,
    pub max_xdot: f64,
    pub max_pdot: f64,
}

/// Activity threshold on `b(x_i)`.
pub const ACTIVE_TOL: f64 = 1e-6;

/// Checks `xdot = v*(-p)`, `pdot = -D_x l - Lambda n`, `p(T) = Dl_T + beta n`
/// with `p_obs = -D_v l(u)`. `Lambda` and `beta` are estimated from the
/// normal mismatch and never imposed.
pub fn euler_lagrange_residual(
    x: &StatePath,
    u: &ControlPath,
    env: &MeanFieldEnv,
    model: &dyn Lagrangian,
    terminal: &dyn TerminalCost,
    domain: &Domain,
) -> ElResidual {
    let d = u.dim;
    let n = u.len();
    let dt = u.grid.dt();
    let mut gx = vec![0.0; n * d];
    let mut pobs = vec![0.0; n * d];
    for i in 0..n {
        let mut gv = vec![0.0; d];
        model.eval(env.time(i), x.node(i), u.node(i), &env.stats[i], &mut gx[i * d..(i + 1) * d], &mut gv);
        for k in 0..d {
            pobs[i * d + k] = -gv[k];
        }
    }
    let active_node: Vec<bool> = (0..n).map(|i| domain.signed_distance(x.node(i)) < ACTIVE_TOL).collect();
    let mut dlt = vec![0.0; d];
    terminal.grad(x.endpoint(), &env.terminal_stats, &mut dlt);
    let last = n - 1;
    let mut beta_hat = 0.0;
    let mut nt = vec![0.0; d];
    if active_node[last] {
        nt = domain.distance_gradient(x.endpoint());
        beta_hat = (0..d).map(|k| nt[k] * (pobs[last * d + k] - dlt[k])).sum();
    }
    let terminal_res = (0..d)
        .map(|k| (pobs[last * d + k] - dlt[k] - beta_hat * nt[k]).powi(2))
        .sum::<f64>()
        .sqrt();

    let mut pdot = vec![0.0; n - 1];
    let mut lambda_hat = vec![0.0; n - 1];
    let mut active = vec![false; n - 1];
    let mut normals = vec![vec![0.0; d]; n - 1];
    for i in 0..n - 1 {
        let r: Vec<f64> = (0..d)
            .map(|k| (pobs[(i + 1) * d + k] - pobs[i * d + k]) / dt + 0.5 * (gx[i * d + k] + gx[(i + 1) * d + k]))
            .collect();
        if active_node[i] || active_node[i + 1] {
            active[i] = true;
            let mut nv = vec![0.0; d];
            for j in [i, i + 1] {
                if active_node[j] {
                    let g = domain.distance_gradient(x.node(j));
                    for k in 0..d {
                        nv[k] += g[k];
                    }
                }
            }
            let nv = normalize(&nv);
            let rn = dot(&r, &nv);
            lambda_hat[i] = -rn;
            pdot[i] = (0..d).map(|k| (r[k] - rn * nv[k]).powi(2)).sum::<f64>().sqrt();
            normals[i] = nv;
        } else {
            pdot[i] = norm(&r);
        }
    }

    let mut p = vec![0.0; n * d];
    for k in 0..d {
        p[last * d + k] = dlt[k] + beta_hat * nt[k];
    }
    for i in (0..n - 1).rev() {
        for k in 0..d {
            p[i * d + k] = p[(i + 1) * d + k]
                + dt * (0.5 * (gx[i * d + k] + gx[(i + 1) * d + k]) + lambda_hat[i] * normals[i][k]);
        }
    }
    let mut xdot = vec![0.0; n];
    for i in 0..n {
        let minus_p: Vec<f64> = p[i * d..(i + 1) * d].iter().map(|c| -c).collect();
        xdot[i] = match dp_hamiltonian(model, env.time(i), x.node(i), &minus_p, &env.stats[i]) {
            Ok(v) => dist(&v, u.node(i)),
            Err(_) => f64::INFINITY,
        };
    }
    let lip_p = (0..n - 1)
        .map(|i| dist(&p[(i + 1) * d..(i + 2) * d], &p[i * d..(i + 1) * d]) / dt)
        .fold(0.0, f64::max);
    ElResidual {
        max_xdot: xdot.iter().cloned().fold(0.0, f64::max),
        max_pdot: pdot.iter().cloned().fold(0.0, f64::max),
        p,
        xdot,
        pdot,
        active,
        lambda_hat,
        beta_hat,
        terminal: terminal_res,
        lip_p,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatticeResult {
    pub control: ControlPath,
    pub cost: f64,
    /// Number of complete piecewise-constant sequences represented.
    pub candidates: f64,
    /// Segment transitions evaluated by the dynamic program.
    pub evaluations: f64,
}

/// Exhaustive search over piecewise-constant lattice controls, organized as
/// an exact dynamic program over lattice states, plus one coordinate-descent
/// pass on the resulting control.
///
/// Segment `k` holds velocity `v_k` on `[t_k, t_{k+1}]`; at interior segment
/// boundaries the node value is `(v_{k-1} + v_k)/2`, which keeps the
/// trapezoidal states equal to the exact piecewise-linear path except at those
/// nodes, where they move by at most `dt |v_k - v_{k-1}| / 4`. Boundary states
/// are therefore required to keep that clearance.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_best_response(
    x0: &[f64],
    eta: &PathMeasure,
    budget: &KBudget,
    model: &dyn Lagrangian,
    terminal: &dyn TerminalCost,
    domain: &Domain,
    segments: usize,
    grid_pts: usize,
) -> Result<LatticeResult, TrajError> {
    assert!((1..=8).contains(&segments) && (2..=9).contains(&grid_pts), "segments <= 8, grid <= 9");
    let env = MeanFieldEnv::new(eta, model, terminal);
    let grid = eta.grid;
    assert!(grid.n % segments == 0, "grid must refine the segments");
    let b0 = domain.signed_distance(x0);
    if b0 < -FEAS_TOL {
        return Err(TrajError::InfeasibleStart(b0));
    }
    let d = model.dim();
    let m = grid.n / segments;
    let dt = grid.dt();
    let seg_len = m as f64 * dt;
    let vmax = (domain.diameter() / grid.t_final).min(budget.k1 / (d as f64).sqrt());
    let spacing = 2.0 * vmax / (grid_pts - 1) as f64;
    let nv = grid_pts.pow(d as u32);
    let velocity = |idx: usize| -> Vec<i64> {
        let mut r = idx;
        (0..d)
            .map(|_| {
                let i = (r % grid_pts) as i64 - (grid_pts as i64 - 1) / 2;
                r /= grid_pts;
                i
            })
            .collect()
    };
    let to_real = |iv: &[i64]| -> Vec<f64> { iv.iter().map(|&c| c as f64 * spacing).collect() };
    let max_jump = 2.0 * vmax * (d as f64).sqrt();
    if segments > 1 && 0.5 * max_jump > budget.k2 * dt + 1e-12 {
        return Err(TrajError::LatticeExceedsBudget);
    }
    let clearance = dt * max_jump / 4.0;
    let candidates = (nv as f64).powi(segments as i32);
    let span = ((grid_pts - 1) * segments + 1) as f64;
    let evaluations_bound = span.powi(d as i32) * nv as f64 * segments as f64;
    if evaluations_bound > 1e8 {
        return Err(TrajError::Combinatorics(evaluations_bound));
    }

    // x(t_k) = x0 + seg_len * spacing * key, with integer key the velocity sum.
    let pos = |key: &[i64]| -> Vec<f64> { (0..d).map(|k| x0[k] + seg_len * spacing * key[k] as f64).collect() };
    let seg_cost = |k: usize, start: &[f64], v: &[f64]| -> Option<f64> {
        let mut c = 0.0;
        for j in 0..=m {
            let i = k * m + j;
            let x: Vec<f64> = (0..d).map(|q| start[q] + j as f64 * dt * v[q]).collect();
            if domain.signed_distance(&x) < -FEAS_TOL {
                return None;
            }
            let w = if j == 0 || j == m { 0.5 * dt } else { dt };
            c += w * model.value(env.time(i), &x, v, &env.stats[i]);
        }
        Some(c)
    };
    use std::collections::BTreeMap;
    // value-to-go keyed by lattice position, computed backward
    let mut levels: Vec<BTreeMap<Vec<i64>, (f64, usize)>> = vec![BTreeMap::new(); segments + 1];
    let mut reach: Vec<Vec<Vec<i64>>> = vec![Vec::new(); segments + 1];
    reach[0].push(vec![0; d]);
    for k in 0..segments {
        let mut next = std::collections::BTreeSet::new();
        for key in &reach[k] {
            for a in 0..nv {
                let dv = velocity(a);
                let nk: Vec<i64> = key.iter().zip(&dv).map(|(p, q)| p + q).collect();
                next.insert(nk);
            }
        }
        reach[k + 1] = next.into_iter().collect();
    }
    for key in &reach[segments] {
        let x = pos(key);
        let val = if domain.signed_distance(&x) < -FEAS_TOL {
            f64::INFINITY
        } else {
            terminal.value(&x, &env.terminal_stats)
        };
        levels[segments].insert(key.clone(), (val, 0));
    }
    let mut evaluations = 0.0;
    for k in (0..segments).rev() {
        for key in &reach[k] {
            let start = pos(key);
            let mut best = (f64::INFINITY, 0);
            if k == 0 || domain.signed_distance(&start) >= clearance {
                for a in 0..nv {
                    evaluations += 1.0;
                    let iv = velocity(a);
                    let nk: Vec<i64> = key.iter().zip(&iv).map(|(p, q)| p + q).collect();
                    let tail = levels[k + 1][&nk].0;
                    if !tail.is_finite() {
                        continue;
                    }
                    if let Some(c) = seg_cost(k, &start, &to_real(&iv)) {
                        if c + tail < best.0 {
                            best = (c + tail, a);
                        }
                    }
                }
            }
            levels[k].insert(key.clone(), best);
        }
    }
    let mut vels = Vec::with_capacity(segments);
    let mut key = vec![0i64; d];
    for k in 0..segments {
        let a = levels[k][&key].1;
        let iv = velocity(a);
        key = key.iter().zip(&iv).map(|(p, q)| p + q).collect();
        vels.push(to_real(&iv));
    }
    let build = |vels: &[Vec<f64>]| -> ControlPath {
        let mut u = ControlPath::zeros(grid, d);
        for i in 0..grid.nodes() {
            let k = (i / m).min(segments - 1);
            let val: Vec<f64> = if i % m == 0 && i > 0 && i < grid.n {
                (0..d).map(|q| 0.5 * (vels[k - 1][q] + vels[k][q])).collect()
            } else {
                vels[k].clone()
            };
            u.node_mut(i).copy_from_slice(&val);
        }
        u
    };
    let eval = |vels: &[Vec<f64>]| -> f64 {
        let u = build(vels);
        let x = rollout(x0, &u, domain);
        if !x.feasible || !u.within_budget(budget, 1e-9) {
            return f64::INFINITY;
        }
        env.cost_of(&x, &u, model, terminal)
    };
    let mut cost = eval(&vels);
    // one coordinate-descent pass by golden section within one lattice cell
    for k in 0..segments {
        for q in 0..d {
            let centre = vels[k][q];
            let f = |z: f64| {
                let mut w = vels.clone();
                w[k][q] = z;
                eval(&w)
            };
            let (mut lo, mut hi) = (centre - spacing, centre + spacing);
            let g = 0.618_033_988_749_895;
            for _ in 0..50 {
                let m1 = hi - g * (hi - lo);
                let m2 = lo + g * (hi - lo);
                if f(m1) < f(m2) {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            let z = 0.5 * (lo + hi);
            let fz = f(z);
            if fz < cost {
                vels[k][q] = z;
                cost = fz;
            }
        }
    }
    Ok(LatticeResult { control: build(&vels).with_budget(*budget), cost, candidates, evaluations })
}
