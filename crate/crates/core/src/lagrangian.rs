//! Running and terminal costs, sampled hypothesis checks and the Legendre
//! dual Hamiltonian.
//!
//! Measure dependence enters only through a small vector of statistics
//! ([`Stats`]) computed once per measure by [`Lagrangian::summarize`].

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Domain;
use crate::measures::{wasserstein1, JointAtom, JointMeasure, StateAtom, StateMeasure, W1Backend};
use crate::numdiff;
use crate::vecops::{dist, dot, norm};

pub type Stats = Vec<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LagrangianError {
    #[error("Legendre solve did not converge: residual {residual:e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
}

/// Declared structural constants of a running cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangianConstants {
    pub n1: f64,
    pub c: f64,
    pub k1: f64,
    pub c1: f64,
    pub kappa1: f64,
}

impl LagrangianConstants {
    /// Floors applied to computed constants of the presets.
    pub const FLOOR: LagrangianConstants = LagrangianConstants { n1: 1.0, c: 2.0, k1: 1.0, c1: 0.0, kappa1: 1.0 };

    pub fn is_valid(&self) -> bool {
        self.c > 1.0
            && [self.n1, self.k1, self.kappa1].iter().all(|v| v.is_finite() && *v > 0.0)
            && self.c1.is_finite()
            && self.c1 >= 0.0
    }
}

/// Running cost `l(t, x, v, nu)`.
pub trait Lagrangian: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn horizon(&self) -> f64;
    fn constants(&self) -> LagrangianConstants;

    /// Statistics of `nu` through which the cost depends on the measure.
    fn summarize(&self, _nu: &JointMeasure) -> Stats {
        Vec::new()
    }

    fn value(&self, t: f64, x: &[f64], v: &[f64], s: &Stats) -> f64;

    fn grad_x(&self, t: f64, x: &[f64], v: &[f64], s: &Stats, out: &mut [f64]) {
        let g = numdiff::gradient(|y| self.value(t, y, v, s), x);
        out.copy_from_slice(&g);
    }

    fn grad_v(&self, t: f64, x: &[f64], v: &[f64], s: &Stats, out: &mut [f64]) {
        let g = numdiff::gradient(|w| self.value(t, x, w, s), v);
        out.copy_from_slice(&g);
    }

    /// `D^2_vv l`.
    fn hess_vv(&self, t: f64, x: &[f64], v: &[f64], s: &Stats) -> DMatrix<f64> {
        let d = self.dim();
        numdiff::jacobian(
            |w| {
                let mut g = vec![0.0; d];
                self.grad_v(t, x, w, s, &mut g);
                g
            },
            v,
            d,
        )
    }

    /// `D^2_xv l`, entry `(i, j) = d^2 l / dx_j dv_i`.
    fn hess_xv(&self, t: f64, x: &[f64], v: &[f64], s: &Stats) -> DMatrix<f64> {
        let d = self.dim();
        numdiff::jacobian(
            |y| {
                let mut g = vec![0.0; d];
                self.grad_v(t, y, v, s, &mut g);
                g
            },
            x,
            d,
        )
    }

    /// Value with both gradients.
    fn eval(&self, t: f64, x: &[f64], v: &[f64], s: &Stats, gx: &mut [f64], gv: &mut [f64]) -> f64 {
        self.grad_x(t, x, v, s, gx);
        self.grad_v(t, x, v, s, gv);
        self.value(t, x, v, s)
    }

    fn value_at(&self, t: f64, x: &[f64], v: &[f64], nu: &JointMeasure) -> f64 {
        self.value(t, x, v, &self.summarize(nu))
    }
}

/// Declared bounds of a terminal cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerminalBounds {
    pub sup_value: f64,
    pub sup_grad: f64,
    pub c1: f64,
}

/// Terminal cost `l_T(x, mu)`.
pub trait TerminalCost: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn bounds(&self) -> TerminalBounds;
    fn summarize(&self, _mu: &StateMeasure) -> Stats {
        Vec::new()
    }
    fn value(&self, x: &[f64], s: &Stats) -> f64;
    fn grad(&self, x: &[f64], s: &Stats, out: &mut [f64]) {
        let g = numdiff::gradient(|y| self.value(y, s), x);
        out.copy_from_slice(&g);
    }
}

/// `G(z) = 1 / (1 + |z|^2)`; `sup |grad G| = 3 sqrt(3) / 8`.
pub const BUMP_LIP: f64 = 0.649_519_052_838_329;

fn bump(z: &[f64]) -> f64 {
    1.0 / (1.0 + dot(z, z))
}

fn bump_grad(z: &[f64], out: &mut [f64]) {
    let q = 1.0 + dot(z, z);
    for (o, zi) in out.iter_mut().zip(z) {
        *o = -2.0 * zi / (q * q);
    }
}

/// Smoothed first-moment coupling `c1 G(x - m_x(nu) - gamma m_v(nu))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Congestion {
    pub c1: f64,
    pub gamma: f64,
}

/// `l = 1/2 (v - a)' A (v - a) - k/2 |x - z|^2 + coupling`, with diagonal `A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticModel {
    pub name: String,
    pub t_final: f64,
    pub weights: Vec<f64>,
    pub preferred: Vec<f64>,
    pub potential: f64,
    pub potential_center: Vec<f64>,
    pub coupling: Option<Congestion>,
    pub declared: LagrangianConstants,
}

impl QuadraticModel {
    fn build(
        name: &str,
        t_final: f64,
        weights: Vec<f64>,
        preferred: Vec<f64>,
        potential: f64,
        coupling: Option<Congestion>,
        domain: &Domain,
    ) -> Self {
        let d = weights.len();
        assert_eq!(preferred.len(), d);
        assert!(gamma_ok(&coupling), "congestion gamma must lie in [0, 1]");
        let mut m = QuadraticModel {
            name: name.into(),
            t_final,
            weights,
            preferred,
            potential,
            potential_center: domain.centre(),
            coupling,
            declared: LagrangianConstants::FLOOR,
        };
        m.declared = m.computed_constants(domain);
        m
    }

    pub fn quadratic(d: usize, t_final: f64, domain: &Domain) -> Self {
        Self::build("quadratic", t_final, vec![1.0; d], vec![0.0; d], 0.0, None, domain)
    }

    pub fn shifted(preferred: Vec<f64>, t_final: f64, domain: &Domain) -> Self {
        let d = preferred.len();
        Self::build("shifted-quadratic", t_final, vec![1.0; d], preferred, 0.0, None, domain)
    }

    pub fn diagonal(weights: Vec<f64>, t_final: f64, domain: &Domain) -> Self {
        let d = weights.len();
        Self::build("diagonal-quadratic", t_final, weights, vec![0.0; d], 0.0, None, domain)
    }

    pub fn congestion(d: usize, c1: f64, gamma: f64, t_final: f64, domain: &Domain) -> Self {
        let coupling = Some(Congestion { c1, gamma });
        Self::build("quadratic-congestion", t_final, vec![1.0; d], vec![0.0; d], 0.0, coupling, domain)
    }

    /// `l = 1/2 |v|^2 - k/2 |x - centre|^2`.
    pub fn radial(d: usize, k: f64, t_final: f64, domain: &Domain) -> Self {
        Self::build("radial-potential", t_final, vec![1.0; d], vec![0.0; d], k, None, domain)
    }

    pub fn c1(&self) -> f64 {
        self.coupling.map_or(0.0, |c| c.c1)
    }

    /// Analytic constants over the working box, raised to the floors.
    pub fn computed_constants(&self, domain: &Domain) -> LagrangianConstants {
        let (lo, hi) = domain.working_box();
        let rx = corner_radius(&lo, &hi, &self.potential_center);
        let c1 = self.c1();
        let aa: f64 = self.weights.iter().zip(&self.preferred).map(|(w, a)| w * a * a).sum();
        let grad_v0: Vec<f64> = self.weights.iter().zip(&self.preferred).map(|(w, a)| w * a).collect();
        let n1 = 0.5 * aa + c1 + 0.5 * self.potential.abs() * rx * rx
            + self.potential.abs() * rx
            + c1 * BUMP_LIP
            + norm(&grad_v0);
        let wmax = self.weights.iter().cloned().fold(f64::MIN, f64::max);
        let wmin = self.weights.iter().cloned().fold(f64::MAX, f64::min);
        let f = LagrangianConstants::FLOOR;
        LagrangianConstants {
            n1: n1.max(f.n1),
            c: wmax.max(1.0 / wmin).max(f.c),
            k1: f.k1,
            c1,
            kappa1: f.kappa1,
        }
    }

    fn coupling_arg(&self, x: &[f64], s: &Stats, out: &mut [f64]) -> f64 {
        let d = x.len();
        let g = self.coupling.map_or(0.0, |c| c.gamma);
        for k in 0..d {
            out[k] = x[k] - s[k] - g * s[d + k];
        }
        self.c1()
    }
}

fn gamma_ok(c: &Option<Congestion>) -> bool {
    c.map_or(true, |c| (0.0..=1.0).contains(&c.gamma) && c.c1 >= 0.0)
}

fn corner_radius(lo: &[f64], hi: &[f64], z: &[f64]) -> f64 {
    lo.iter()
        .zip(hi)
        .zip(z)
        .map(|((l, h), zi)| (l - zi).abs().max((h - zi).abs()).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl Lagrangian for QuadraticModel {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.weights.len()
    }
    fn horizon(&self) -> f64 {
        self.t_final
    }
    fn constants(&self) -> LagrangianConstants {
        self.declared
    }

    fn summarize(&self, nu: &JointMeasure) -> Stats {
        if self.coupling.is_none() {
            return Vec::new();
        }
        let d = self.dim();
        let mut s = vec![0.0; 2 * d];
        for a in &nu.atoms {
            for k in 0..d {
                s[k] += a.weight * a.x[k];
                s[d + k] += a.weight * a.v[k];
            }
        }
        s
    }

    fn value(&self, _t: f64, x: &[f64], v: &[f64], s: &Stats) -> f64 {
        let d = x.len();
        let mut val = 0.0;
        for k in 0..d {
            let e = v[k] - self.preferred[k];
            val += 0.5 * self.weights[k] * e * e;
        }
        if self.potential != 0.0 {
            val -= 0.5 * self.potential * dist(x, &self.potential_center).powi(2);
        }
        if self.coupling.is_some() {
            let mut z = [0.0; 8];
            let c1 = self.coupling_arg(x, s, &mut z[..d]);
            val += c1 * bump(&z[..d]);
        }
        val
    }

    fn grad_x(&self, _t: f64, x: &[f64], _v: &[f64], s: &Stats, out: &mut [f64]) {
        let d = x.len();
        for k in 0..d {
            out[k] = -self.potential * (x[k] - self.potential_center[k]);
        }
        if self.coupling.is_some() {
            let mut z = [0.0; 8];
            let mut g = [0.0; 8];
            let c1 = self.coupling_arg(x, s, &mut z[..d]);
            bump_grad(&z[..d], &mut g[..d]);
            for k in 0..d {
                out[k] += c1 * g[k];
            }
        }
    }

    fn grad_v(&self, _t: f64, _x: &[f64], v: &[f64], _s: &Stats, out: &mut [f64]) {
        for k in 0..v.len() {
            out[k] = self.weights[k] * (v[k] - self.preferred[k]);
        }
    }

    fn hess_vv(&self, _t: f64, _x: &[f64], _v: &[f64], _s: &Stats) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.weights.clone()))
    }

    fn hess_xv(&self, _t: f64, x: &[f64], _v: &[f64], _s: &Stats) -> DMatrix<f64> {
        DMatrix::zeros(x.len(), x.len())
    }

    fn eval(&self, t: f64, x: &[f64], v: &[f64], s: &Stats, gx: &mut [f64], gv: &mut [f64]) -> f64 {
        self.grad_x(t, x, v, s, gx);
        self.grad_v(t, x, v, s, gv);
        self.value(t, x, v, s)
    }
}

/// `l(v) = a . v`; not strictly convex, kept for negative checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub slope: Vec<f64>,
    pub t_final: f64,
    pub declared: LagrangianConstants,
}

impl Lagrangian for LinearModel {
    fn name(&self) -> &str {
        "linear"
    }
    fn dim(&self) -> usize {
        self.slope.len()
    }
    fn horizon(&self) -> f64 {
        self.t_final
    }
    fn constants(&self) -> LagrangianConstants {
        self.declared
    }
    fn value(&self, _t: f64, _x: &[f64], v: &[f64], _s: &Stats) -> f64 {
        dot(&self.slope, v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TerminalKind {
    Zero,
    /// `w |x - a|^2`
    Target { weight: f64, target: Vec<f64> },
    /// `sin(x_1)`
    Sine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Terminal {
    pub kind: TerminalKind,
    pub declared: TerminalBounds,
}

impl Terminal {
    pub fn zero() -> Self {
        Terminal { kind: TerminalKind::Zero, declared: TerminalBounds { sup_value: 0.0, sup_grad: 0.0, c1: 0.0 } }
    }

    pub fn target(weight: f64, target: Vec<f64>, domain: &Domain) -> Self {
        let (lo, hi) = domain.working_box();
        let r = corner_radius(&lo, &hi, &target);
        Terminal {
            declared: TerminalBounds { sup_value: weight * r * r, sup_grad: 2.0 * weight * r, c1: 0.0 },
            kind: TerminalKind::Target { weight, target },
        }
    }

    pub fn sine() -> Self {
        Terminal { kind: TerminalKind::Sine, declared: TerminalBounds { sup_value: 1.0, sup_grad: 1.0, c1: 0.0 } }
    }
}

impl TerminalCost for Terminal {
    fn name(&self) -> &str {
        match self.kind {
            TerminalKind::Zero => "zero",
            TerminalKind::Target { .. } => "target",
            TerminalKind::Sine => "sine",
        }
    }
    fn bounds(&self) -> TerminalBounds {
        self.declared
    }
    fn value(&self, x: &[f64], _s: &Stats) -> f64 {
        match &self.kind {
            TerminalKind::Zero => 0.0,
            TerminalKind::Target { weight, target } => weight * dist(x, target).powi(2),
            TerminalKind::Sine => x[0].sin(),
        }
    }
    fn grad(&self, x: &[f64], _s: &Stats, out: &mut [f64]) {
        match &self.kind {
            TerminalKind::Zero => out.fill(0.0),
            TerminalKind::Target { weight, target } => {
                for k in 0..x.len() {
                    out[k] = 2.0 * weight * (x[k] - target[k]);
                }
            }
            TerminalKind::Sine => {
                out.fill(0.0);
                out[0] = x[0].cos();
            }
        }
    }
}

const LEGENDRE_TOL: f64 = 1e-12;
const LEGENDRE_ACCEPT: f64 = 1e-10;
const LEGENDRE_CAP: usize = 100;

/// `h = sup_v p.v - l(t,x,v,.)` and its maximizer, by damped Newton on
/// `D_v l(v) = p` with a golden-section fallback along the residual.
pub fn legendre_transform(
    model: &dyn Lagrangian,
    t: f64,
    x: &[f64],
    p: &[f64],
    s: &Stats,
) -> Result<(f64, Vec<f64>), LagrangianError> {
    let d = model.dim();
    let phi = |v: &[f64]| model.value(t, x, v, s) - dot(p, v);
    let mut v = vec![0.0; d];
    let mut g = vec![0.0; d];
    let scale = 1.0 + norm(p);
    let mut res = f64::INFINITY;
    for it in 0..LEGENDRE_CAP {
        model.grad_v(t, x, &v, s, &mut g);
        let r: Vec<f64> = g.iter().zip(p).map(|(a, b)| a - b).collect();
        res = norm(&r);
        if res <= LEGENDRE_TOL * scale {
            return Ok((dot(p, &v) - model.value(t, x, &v, s), v));
        }
        let h = model.hess_vv(t, x, &v, s);
        let step = h.clone().lu().solve(&DVector::from_column_slice(&r));
        let f0 = phi(&v);
        let mut moved = false;
        if let Some(step) = step {
            let dir: Vec<f64> = step.iter().map(|z| -z).collect();
            if dot(&dir, &r) < 0.0 {
                let mut a = 1.0;
                for _ in 0..40 {
                    let cand: Vec<f64> = v.iter().zip(&dir).map(|(vi, di)| vi + a * di).collect();
                    if phi(&cand) <= f0 + 1e-4 * a * dot(&dir, &r) || a * norm(&dir) < 1e-15 * (1.0 + norm(&v)) {
                        v = cand;
                        moved = true;
                        break;
                    }
                    a *= 0.5;
                }
            }
        }
        if !moved {
            // golden section along -r on [0, 1 + |r|]
            let dir: Vec<f64> = r.iter().map(|z| -z / res).collect();
            let along = |a: f64| phi(&v.iter().zip(&dir).map(|(vi, di)| vi + a * di).collect::<Vec<_>>());
            let (mut lo, mut hi) = (0.0, 1.0 + res);
            let gr = 0.618_033_988_749_895;
            for _ in 0..100 {
                let m1 = hi - gr * (hi - lo);
                let m2 = lo + gr * (hi - lo);
                if along(m1) < along(m2) {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            let a = 0.5 * (lo + hi);
            if a * (1.0 + res) < 1e-300 || it == LEGENDRE_CAP - 1 {
                break;
            }
            v = v.iter().zip(&dir).map(|(vi, di)| vi + a * di).collect();
        }
    }
    model.grad_v(t, x, &v, s, &mut g);
    res = res.min(dist(&g, p));
    if res <= LEGENDRE_ACCEPT * scale {
        Ok((dot(p, &v) - model.value(t, x, &v, s), v))
    } else {
        Err(LagrangianError::NoConvergence { residual: res, iterations: LEGENDRE_CAP })
    }
}

/// `D_p h`, the Legendre maximizer.
pub fn dp_hamiltonian(
    model: &dyn Lagrangian,
    t: f64,
    x: &[f64],
    p: &[f64],
    s: &Stats,
) -> Result<Vec<f64>, LagrangianError> {
    legendre_transform(model, t, x, p, s).map(|r| r.1)
}

/// `D_x h = -D_x l(t, x, v*)` by the envelope identity.
pub fn dx_hamiltonian(
    model: &dyn Lagrangian,
    t: f64,
    x: &[f64],
    p: &[f64],
    s: &Stats,
) -> Result<Vec<f64>, LagrangianError> {
    let v = dp_hamiltonian(model, t, x, p, s)?;
    let mut g = vec![0.0; x.len()];
    model.grad_x(t, x, &v, s, &mut g);
    Ok(g.iter().map(|z| -z).collect())
}

/// Sampled constants of the Hamiltonian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianView {
    pub n2: f64,
    pub k2: f64,
    pub c2: f64,
    pub kappa2: f64,
}

/// Safety factor on sampled constants.
pub const SAMPLE_SAFETY: f64 = 1.25;

/// Random atomic joint measure with `x` in the closure and `|v| <= vmax`.
pub fn random_joint_measure(rng: &mut impl Rng, domain: &Domain, atoms: usize, vmax: f64) -> JointMeasure {
    let raw: Vec<f64> = (0..atoms).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    JointMeasure {
        atoms: raw
            .iter()
            .map(|w| JointAtom {
                x: random_point_in(rng, domain),
                v: (0..domain.dim()).map(|_| rng.gen_range(-vmax..vmax) / (domain.dim() as f64).sqrt()).collect(),
                weight: w / total,
            })
            .collect(),
    }
}

pub fn random_point_in(rng: &mut impl Rng, domain: &Domain) -> Vec<f64> {
    let (lo, hi) = domain.working_box();
    loop {
        let x: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| rng.gen_range(*a..*b)).collect();
        if domain.signed_distance(&x) >= 0.0 {
            return x;
        }
    }
}

fn random_in_box(rng: &mut impl Rng, domain: &Domain) -> Vec<f64> {
    let (lo, hi) = domain.working_box();
    lo.iter().zip(&hi).map(|(a, b)| rng.gen_range(*a..*b)).collect()
}

/// Estimates `n2, k2, kappa2` by sampling the Hamiltonian (times 1.25) and
/// sets `c2 = c1 c`.
pub fn hamiltonian_view(model: &dyn Lagrangian, domain: &Domain, samples: usize, seed: u64) -> HamiltonianView {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.dim();
    let k = model.constants();
    let tf = model.horizon();
    let (mut n2, mut k2, mut kappa2): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..samples {
        let t = rng.gen_range(0.0..tf);
        let x = random_in_box(&mut rng, domain);
        let nu = random_joint_measure(&mut rng, domain, 3, 3.0);
        let s = model.summarize(&nu);
        let zero = vec![0.0; d];
        if let Ok((h0, v0)) = legendre_transform(model, t, &x, &zero, &s) {
            let mut gx = vec![0.0; d];
            model.grad_x(t, &x, &v0, &s, &mut gx);
            n2 = n2.max(h0.abs() + norm(&gx) + norm(&v0));
        }
        let p: Vec<f64> = (0..d).map(|_| rng.gen_range(-10.0..10.0)).collect();
        if let Ok(v) = dp_hamiltonian(model, t, &x, &p, &s) {
            // D^2_xp h = -(D^2_vv l)^{-1} D^2_xv l at the maximizer
            let hvv = model.hess_vv(t, &x, &v, &s);
            let hxv = model.hess_xv(t, &x, &v, &s);
            if let Some(inv) = hvv.try_inverse() {
                let m = inv * hxv;
                k2 = k2.max(numdiff::spectral_norm(&m) / (1.0 + norm(&p)));
            }
            let dt = 1e-3 * tf;
            let t2 = if t + dt <= tf { t + dt } else { t - dt };
            if let (Ok((h1, _)), Ok((h2, v2))) = (
                legendre_transform(model, t, &x, &p, &s),
                legendre_transform(model, t2, &x, &p, &s),
            ) {
                let r1 = (h1 - h2).abs() / ((1.0 + norm(&p).powi(2)) * dt);
                let r2 = dist(&v, &v2) / ((1.0 + norm(&p)) * dt);
                kappa2 = kappa2.max(r1).max(r2);
            }
        }
    }
    HamiltonianView {
        n2: SAMPLE_SAFETY * n2,
        k2: SAMPLE_SAFETY * k2,
        c2: k.c1 * k.c,
        kappa2: SAMPLE_SAFETY * kappa2,
    }
}

/// `(C(c,n1), C(k1,n1), C(c,n2), C(k2,n2))` with `C(c,n) = n + c` and
/// `C(k,n) = n + 1.5 k`.
pub fn derived_derivative_bounds(k: &LagrangianConstants, h: &HamiltonianView) -> (f64, f64, f64, f64) {
    (k.n1 + k.c, k.n1 + 1.5 * k.k1, h.n2 + k.c, h.n2 + 1.5 * h.k2)
}

#[derive(Clone, Debug, Serialize)]
pub struct HypothesisRow {
    pub hypothesis: String,
    pub declared: f64,
    /// Largest observed ratio of sampled quantity to declared bound.
    pub worst_ratio: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct HypothesisReport {
    pub samples: usize,
    pub rows: Vec<HypothesisRow>,
}

impl HypothesisReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn row(&self, name: &str) -> Option<&HypothesisRow> {
        self.rows.iter().find(|r| r.hypothesis == name)
    }
}

/// Ratio `num / den` where a zero bound admits only zero.
fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Samples every structural hypothesis and compares against the declared constants.
pub fn verify_hypotheses(
    model: &dyn Lagrangian,
    terminal: &dyn TerminalCost,
    domain: &Domain,
    sample_budget: usize,
    seed: u64,
) -> HypothesisReport {
    let samples = sample_budget.max(1000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.dim();
    let k = model.constants();
    let tb = terminal.bounds();
    let tf = model.horizon();
    let mut worst = [0.0f64; 14];
    let names = [
        "L-i bound at v=0",
        "L-ii(a) lower Hessian",
        "L-ii(a) upper Hessian",
        "L-ii(a) mixed Hessian",
        "L-ii(b) l measure-Lipschitz",
        "L-ii(b) D_v l measure-Lipschitz",
        "L-iii l time-Lipschitz",
        "L-iii D_v l time-Lipschitz",
        "T-i sup l_T",
        "T-i sup Dl_T",
        "T-ii l_T measure-Lipschitz",
        "T-ii Dl_T measure-Lipschitz",
        "h Hessian bounds",
        "h measure-Lipschitz (c2 = c1 c)",
    ];
    let declared = [k.n1, k.c, k.c, k.k1, k.c1, k.c1, k.kappa1, k.kappa1, tb.sup_value, tb.sup_grad, tb.c1, tb.c1, k.c, k.c1 * k.c];
    let mut gx = vec![0.0; d];
    let mut gv = vec![0.0; d];
    let mut gv2 = vec![0.0; d];
    for _ in 0..samples {
        let t = rng.gen_range(0.0..tf);
        let x = random_in_box(&mut rng, domain);
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let n_a = rng.gen_range(1..=4);
        let n_b = rng.gen_range(1..=4);
        let nu1 = random_joint_measure(&mut rng, domain, n_a, 3.0);
        let nu2 = random_joint_measure(&mut rng, domain, n_b, 3.0);
        let s1 = model.summarize(&nu1);
        let s2 = model.summarize(&nu2);
        let zero = vec![0.0; d];

        let l0 = model.eval(t, &x, &zero, &s1, &mut gx, &mut gv);
        worst[0] = worst[0].max(ratio(l0.abs() + norm(&gx) + norm(&gv), k.n1));

        let hvv = model.hess_vv(t, &x, &v, &s1);
        let eig = hvv.clone().symmetric_eigen().eigenvalues;
        let (emin, emax) = (eig.min(), eig.max());
        worst[1] = worst[1].max(if emin > 0.0 { (1.0 / k.c) / emin } else { f64::INFINITY });
        worst[2] = worst[2].max(emax / k.c);
        let hxv = model.hess_xv(t, &x, &v, &s1);
        worst[3] = worst[3].max(ratio(numdiff::spectral_norm(&hxv), k.k1 * (1.0 + norm(&v))));

        let w1 = wasserstein1(&nu1, &nu2, W1Backend::Flow).unwrap_or(f64::INFINITY);
        let dl = (model.value(t, &x, &v, &s1) - model.value(t, &x, &v, &s2)).abs();
        worst[4] = worst[4].max(ratio(dl, k.c1 * w1));
        model.grad_v(t, &x, &v, &s1, &mut gv);
        model.grad_v(t, &x, &v, &s2, &mut gv2);
        worst[5] = worst[5].max(ratio(dist(&gv, &gv2), k.c1 * w1));

        let s = rng.gen_range(0.0..tf);
        if (s - t).abs() > 1e-9 {
            let dl = (model.value(t, &x, &v, &s1) - model.value(s, &x, &v, &s1)).abs();
            worst[6] = worst[6].max(ratio(dl, k.kappa1 * (1.0 + dot(&v, &v)) * (t - s).abs()));
            model.grad_v(s, &x, &v, &s1, &mut gv2);
            worst[7] = worst[7].max(ratio(dist(&gv, &gv2), k.kappa1 * (1.0 + norm(&v)) * (t - s).abs()));
        }

        let mu1 = random_state_measure(&mut rng, domain, n_a);
        let mu2 = random_state_measure(&mut rng, domain, n_b);
        let ts1 = terminal.summarize(&mu1);
        let ts2 = terminal.summarize(&mu2);
        let lt = terminal.value(&x, &ts1);
        terminal.grad(&x, &ts1, &mut gx);
        worst[8] = worst[8].max(ratio(lt.abs(), tb.sup_value));
        worst[9] = worst[9].max(ratio(norm(&gx), tb.sup_grad));
        let w1s = wasserstein1(&mu1, &mu2, W1Backend::Flow).unwrap_or(f64::INFINITY);
        worst[10] = worst[10].max(ratio((lt - terminal.value(&x, &ts2)).abs(), tb.c1 * w1s));
        terminal.grad(&x, &ts2, &mut gv2);
        worst[11] = worst[11].max(ratio(dist(&gx, &gv2), tb.c1 * w1s));

        if emin > 0.0 {
            // D^2_pp h = (D^2_vv l)^{-1} at the maximizer
            let p: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
            if let (Ok(va), Ok(vb)) = (dp_hamiltonian(model, t, &x, &p, &s1), dp_hamiltonian(model, t, &x, &p, &s2)) {
                if let Some(inv) = model.hess_vv(t, &x, &va, &s1).try_inverse() {
                    let e = inv.symmetric_eigen().eigenvalues;
                    let r = (e.max() / k.c).max(if e.min() > 0.0 { (1.0 / k.c) / e.min() } else { f64::INFINITY });
                    worst[12] = worst[12].max(r);
                }
                worst[13] = worst[13].max(ratio(dist(&va, &vb), k.c1 * k.c * w1));
            } else {
                worst[12] = f64::INFINITY;
            }
        } else {
            worst[12] = f64::INFINITY;
        }
    }
    let rows = names
        .iter()
        .zip(declared)
        .zip(worst)
        .map(|((n, dcl), w)| HypothesisRow {
            hypothesis: n.to_string(),
            declared: dcl,
            worst_ratio: w,
            pass: w <= 1.0 + 1e-9,
        })
        .collect();
    HypothesisReport { samples, rows }
}

fn random_state_measure(rng: &mut impl Rng, domain: &Domain, atoms: usize) -> StateMeasure {
    let raw: Vec<f64> = (0..atoms).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    StateMeasure {
        atoms: raw
            .iter()
            .map(|w| StateAtom { x: random_point_in(rng, domain), weight: w / total })
            .collect(),
    }
}
