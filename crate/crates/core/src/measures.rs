//! Atomic measures on path space, state-control space and state space, and
//! exact 1-Wasserstein distances between them.
//!
//! The ground metric on state-control space is the sum metric
//! `|x - x'| + |v - v'|`; on state space it is the Euclidean distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::KBudget;
use crate::trajopt::{ControlPath, StatePath, TimeGrid};
use crate::vecops::dist;

/// Largest atom-count product accepted by [`wasserstein1`].
pub const SIZE_LIMIT: usize = 10_000_000;
/// Initial points closer than this are grouped together.
pub const SNAP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("transport problem of size {0} exceeds the limit of {SIZE_LIMIT}")]
    SizeLimit(usize),
    #[error("masses differ: {0} vs {1}")]
    MassMismatch(f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointAtom {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub weight: f64,
}

/// Weighted atoms on state x control space.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointMeasure {
    pub atoms: Vec<JointAtom>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateAtom {
    pub x: Vec<f64>,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateMeasure {
    pub atoms: Vec<StateAtom>,
}

impl JointMeasure {
    pub fn dirac(x: Vec<f64>, v: Vec<f64>) -> Self {
        JointMeasure { atoms: vec![JointAtom { x, v, weight: 1.0 }] }
    }

    pub fn mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }
}

impl StateMeasure {
    pub fn dirac(x: Vec<f64>) -> Self {
        StateMeasure { atoms: vec![StateAtom { x, weight: 1.0 }] }
    }

    pub fn uniform(points: Vec<Vec<f64>>) -> Self {
        let w = 1.0 / points.len() as f64;
        StateMeasure { atoms: points.into_iter().map(|x| StateAtom { x, weight: w }).collect() }
    }

    pub fn mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }
}

/// A finite atomic measure with its own ground metric.
pub trait AtomicMeasure {
    fn len(&self) -> usize;
    fn weight(&self, i: usize) -> f64;
    fn ground(&self, i: usize, other: &Self, j: usize) -> f64;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl AtomicMeasure for JointMeasure {
    fn len(&self) -> usize {
        self.atoms.len()
    }
    fn weight(&self, i: usize) -> f64 {
        self.atoms[i].weight
    }
    fn ground(&self, i: usize, other: &Self, j: usize) -> f64 {
        let (a, b) = (&self.atoms[i], &other.atoms[j]);
        dist(&a.x, &b.x) + dist(&a.v, &b.v)
    }
}

impl AtomicMeasure for StateMeasure {
    fn len(&self) -> usize {
        self.atoms.len()
    }
    fn weight(&self, i: usize) -> f64 {
        self.atoms[i].weight
    }
    fn ground(&self, i: usize, other: &Self, j: usize) -> f64 {
        dist(&self.atoms[i].x, &other.atoms[j].x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub state: StatePath,
    pub control: ControlPath,
    pub weight: f64,
}

/// Weighted (state path, control path) particles on a shared grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathMeasure {
    pub grid: TimeGrid,
    pub dim: usize,
    pub particles: Vec<Particle>,
}

impl PathMeasure {
    pub fn new(grid: TimeGrid, dim: usize, particles: Vec<Particle>) -> Self {
        PathMeasure { grid, dim, particles }
    }

    pub fn mass(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }

    /// `(1 - alpha) self + alpha other` as a concatenation of particles.
    pub fn mix(&self, other: &PathMeasure, alpha: f64) -> PathMeasure {
        let mut particles = Vec::with_capacity(self.particles.len() + other.particles.len());
        for p in &self.particles {
            particles.push(Particle { weight: (1.0 - alpha) * p.weight, ..p.clone() });
        }
        for p in &other.particles {
            particles.push(Particle { weight: alpha * p.weight, ..p.clone() });
        }
        particles.retain(|p| p.weight > 0.0);
        PathMeasure { grid: self.grid, dim: self.dim, particles }
    }

    /// Drops particles lighter than `threshold` and renormalizes.
    /// Returns the discarded mass.
    pub fn prune(&mut self, threshold: f64) -> f64 {
        let before = self.mass();
        self.particles.retain(|p| p.weight >= threshold);
        let after = self.mass();
        for p in &mut self.particles {
            p.weight *= before / after;
        }
        before - after
    }

    /// Initial marginal `(pi^1 o e_0)# eta`, grouped by snapped initial point.
    pub fn initial_marginal(&self) -> StateMeasure {
        StateMeasure {
            atoms: disintegrate_by_initial(self)
                .into_iter()
                .map(|c| StateAtom { x: c.x0, weight: c.mass })
                .collect(),
        }
    }
}

pub fn push_forward_at_time(eta: &PathMeasure, t: f64) -> JointMeasure {
    JointMeasure {
        atoms: eta
            .particles
            .iter()
            .map(|p| JointAtom {
                x: p.state.at_time(t),
                v: p.control.at_time(t),
                weight: p.weight,
            })
            .collect(),
    }
}

/// Push-forward at grid node `i`, without interpolation.
pub fn push_forward_at_node(eta: &PathMeasure, i: usize) -> JointMeasure {
    JointMeasure {
        atoms: eta
            .particles
            .iter()
            .map(|p| JointAtom {
                x: p.state.node(i).to_vec(),
                v: p.control.node(i).to_vec(),
                weight: p.weight,
            })
            .collect(),
    }
}

pub fn state_marginal(nu: &JointMeasure) -> StateMeasure {
    StateMeasure {
        atoms: nu.atoms.iter().map(|a| StateAtom { x: a.x.clone(), weight: a.weight }).collect(),
    }
}

/// One conditional of a disintegration.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditional {
    pub x0: Vec<f64>,
    pub mass: f64,
    pub measure: PathMeasure,
}

/// Groups particles by initial point (in order of first appearance) and
/// renormalizes each group.
pub fn disintegrate_by_initial(eta: &PathMeasure) -> Vec<Conditional> {
    let mut groups: Vec<Conditional> = Vec::new();
    for p in &eta.particles {
        let x0 = &p.state.x0;
        let slot = groups.iter_mut().find(|g| {
            g.x0.iter().zip(x0).all(|(a, b)| (a - b).abs() <= SNAP)
        });
        match slot {
            Some(g) => {
                g.mass += p.weight;
                g.measure.particles.push(p.clone());
            }
            None => groups.push(Conditional {
                x0: x0.clone(),
                mass: p.weight,
                measure: PathMeasure::new(eta.grid, eta.dim, vec![p.clone()]),
            }),
        }
    }
    for g in &mut groups {
        for p in &mut g.measure.particles {
            p.weight /= g.mass;
        }
    }
    groups
}

/// Inverse of [`disintegrate_by_initial`].
pub fn remix(conditionals: &[Conditional]) -> Option<PathMeasure> {
    let first = conditionals.first()?;
    let mut particles = Vec::new();
    for c in conditionals {
        for p in &c.measure.particles {
            particles.push(Particle { weight: c.mass * p.weight, ..p.clone() });
        }
    }
    Some(PathMeasure::new(first.measure.grid, first.measure.dim, particles))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum W1Backend {
    /// Exact min-cost flow.
    Flow,
    /// Cheapest-edge-first feasible coupling; an upper bound.
    Greedy,
}

/// Result of a transport solve.
#[derive(Clone, Debug, PartialEq)]
pub struct Transport {
    pub cost: f64,
    /// Kantorovich dual value of a feasible potential pair; a lower bound.
    pub dual: f64,
}

pub fn wasserstein1<M: AtomicMeasure>(a: &M, b: &M, backend: W1Backend) -> Result<f64, MeasureError> {
    let size = a.len() * b.len();
    if size > SIZE_LIMIT {
        return Err(MeasureError::SizeLimit(size));
    }
    let wa: Vec<f64> = (0..a.len()).map(|i| a.weight(i)).collect();
    let wb: Vec<f64> = (0..b.len()).map(|j| b.weight(j)).collect();
    let (ma, mb) = (wa.iter().sum::<f64>(), wb.iter().sum::<f64>());
    if (ma - mb).abs() > 1e-9 {
        return Err(MeasureError::MassMismatch(ma, mb));
    }
    let cost: Vec<f64> = (0..a.len())
        .flat_map(|i| (0..b.len()).map(move |j| (i, j)))
        .map(|(i, j)| a.ground(i, b, j))
        .collect();
    Ok(match backend {
        W1Backend::Flow => transport_flow(&wa, &wb, &cost).cost,
        W1Backend::Greedy => transport_greedy(&wa, &wb, &cost),
    })
}

const CAP_EPS: f64 = 1e-15;

/// Exact transport by successive shortest paths with node potentials.
/// `cost` is row-major `n x m`.
pub fn transport_flow(a: &[f64], b: &[f64], cost: &[f64]) -> Transport {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Transport { cost: 0.0, dual: 0.0 };
    }
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = vec![0.0; n * m];
    // node layout: sources 0..n, sinks n..n+m; a virtual root feeds every
    // source with remaining supply at distance zero
    let v = n + m;
    let mut pot = vec![0.0; v];
    let mut distv = vec![0.0; v];
    let mut prev = vec![usize::MAX; v];
    let mut done = vec![false; v];
    let total = a.iter().sum::<f64>().min(b.iter().sum::<f64>());
    let mut shipped = 0.0;
    while shipped < total - CAP_EPS {
        for k in 0..v {
            distv[k] = f64::INFINITY;
            prev[k] = usize::MAX;
            done[k] = false;
        }
        for i in 0..n {
            if supply[i] > CAP_EPS {
                distv[i] = 0.0;
            }
        }
        let mut target = usize::MAX;
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for k in 0..v {
                if !done[k] && distv[k] < best {
                    best = distv[k];
                    u = k;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u >= n && demand[u - n] > CAP_EPS {
                target = u;
                break;
            }
            if u < n {
                for j in 0..m {
                    let w = n + j;
                    if done[w] {
                        continue;
                    }
                    let rc = cost[u * m + j] + pot[u] - pot[w];
                    let nd = distv[u] + rc.max(0.0);
                    if nd < distv[w] {
                        distv[w] = nd;
                        prev[w] = u;
                    }
                }
            } else {
                let j = u - n;
                for i in 0..n {
                    if done[i] || flow[i * m + j] <= CAP_EPS {
                        continue;
                    }
                    let rc = -cost[i * m + j] + pot[u] - pot[i];
                    let nd = distv[u] + rc.max(0.0);
                    if nd < distv[i] {
                        distv[i] = nd;
                        prev[i] = u;
                    }
                }
            }
        }
        if target == usize::MAX {
            break;
        }
        let dt = distv[target];
        for k in 0..v {
            pot[k] += if done[k] { distv[k] } else { dt };
        }
        // bottleneck
        let mut delta = demand[target - n];
        let mut w = target;
        while prev[w] != usize::MAX {
            let u = prev[w];
            if u >= n {
                delta = delta.min(flow[w * m + (u - n)]);
            }
            w = u;
        }
        delta = delta.min(supply[w]);
        let mut w = target;
        while prev[w] != usize::MAX {
            let u = prev[w];
            if u < n {
                flow[u * m + (w - n)] += delta;
            } else {
                flow[w * m + (u - n)] -= delta;
            }
            w = u;
        }
        supply[w] -= delta;
        demand[target - n] -= delta;
        shipped += delta;
    }
    let primal: f64 = flow.iter().zip(cost).map(|(f, c)| f * c.max(0.0)).sum();
    // feasible dual pair: g_i = pot_i, f_j = min_i (c_ij + g_i)
    let mut dual = -(0..n).map(|i| a[i] * pot[i]).sum::<f64>();
    for j in 0..m {
        let fj = (0..n).map(|i| cost[i * m + j] + pot[i]).fold(f64::INFINITY, f64::min);
        dual += b[j] * fj;
    }
    Transport { cost: primal, dual }
}

/// Feasible coupling built by filling the cheapest pairs first.
pub fn transport_greedy(a: &[f64], b: &[f64], cost: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut order: Vec<usize> = (0..n * m).collect();
    order.sort_by(|&p, &q| cost[p].total_cmp(&cost[q]).then(p.cmp(&q)));
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    let mut total = 0.0;
    for k in order {
        let (i, j) = (k / m, k % m);
        let q = sa[i].min(sb[j]);
        if q > 0.0 {
            total += q * cost[k];
            sa[i] -= q;
            sb[j] -= q;
        }
    }
    total
}

/// Distance `d_Gamma = sup |x1 - x2| + sup |u1 - u2|` over grid nodes.
pub fn path_distance(p: &Particle, q: &Particle) -> f64 {
    let n = p.state.len();
    let mut dx: f64 = 0.0;
    let mut du: f64 = 0.0;
    for i in 0..n {
        dx = dx.max(dist(p.state.node(i), q.state.node(i)));
        du = du.max(dist(p.control.node(i), q.control.node(i)));
    }
    dx + du
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowLipschitzReport {
    pub pairs: usize,
    /// Largest `W1(nu_s, nu_t) / ((K1 + K2) |s - t|)`.
    pub worst_ratio: f64,
    /// Largest `W1(nu_s, nu_t) - (K1 + K2)|s - t|`.
    pub worst_excess: f64,
    pub pass: bool,
}

/// Samples time pairs and compares `W1(nu_s, nu_t)` with `(K1 + K2)|s - t|`.
pub fn flow_lipschitz_check(eta: &PathMeasure, budget: &KBudget, pairs: usize, seed: u64) -> FlowLipschitzReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_final = eta.grid.t_final;
    let lip = budget.k1 + budget.k2;
    let mut worst_ratio: f64 = 0.0;
    let mut worst_excess = f64::NEG_INFINITY;
    for k in 0..pairs {
        let s = rng.gen_range(0.0..t_final);
        // mix long and short separations
        let t = if k % 2 == 0 {
            rng.gen_range(0.0..t_final)
        } else {
            (s + rng.gen_range(-2.0..2.0) * eta.grid.dt()).clamp(0.0, t_final)
        };
        if (s - t).abs() < 1e-12 {
            continue;
        }
        let w = wasserstein1(&push_forward_at_time(eta, s), &push_forward_at_time(eta, t), W1Backend::Flow)
            .unwrap_or(f64::INFINITY);
        worst_ratio = worst_ratio.max(w / (lip * (s - t).abs()));
        worst_excess = worst_excess.max(w - lip * (s - t).abs());
    }
    FlowLipschitzReport { pairs, worst_ratio, worst_excess, pass: worst_excess <= 1e-8 }
}

/// Path measures under the ground metric [`path_distance`].
impl AtomicMeasure for PathMeasure {
    fn len(&self) -> usize {
        self.particles.len()
    }
    fn weight(&self, i: usize) -> f64 {
        self.particles[i].weight
    }
    fn ground(&self, i: usize, other: &Self, j: usize) -> f64 {
        path_distance(&self.particles[i], &other.particles[j])
    }
}
