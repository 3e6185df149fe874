//! Regularity budget and the derived-constant ledger.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Domain;
use crate::lagrangian::{
    dp_hamiltonian, hamiltonian_view, random_joint_measure, HamiltonianView, Lagrangian, LagrangianConstants,
    TerminalBounds, TerminalCost,
};
use crate::measures::JointMeasure;
use crate::vecops::norm;

/// Velocity bound `k1` and control Lipschitz bound `k2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KBudget {
    pub k1: f64,
    pub k2: f64,
}

impl KBudget {
    pub fn new(k1: f64, k2: f64) -> Self {
        KBudget { k1, k2 }
    }

    /// `K^{+1} = (K1 + 1, K2 + 1)`.
    pub fn inflated(&self) -> Self {
        KBudget { k1: self.k1 + 1.0, k2: self.k2 + 1.0 }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstantsError {
    #[error("small-data condition fails: c1 = {c1}, b6 c1 + c2 = {rate}")]
    SmallnessViolated { c1: f64, rate: f64 },
    #[error("no budget found below 2^60")]
    NoBudget,
}

/// Everything the estimate chain reads, frozen after sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainInput {
    pub dim: usize,
    pub t_final: f64,
    pub lagrangian: LagrangianConstants,
    pub terminal: TerminalBounds,
    pub hamiltonian: HamiltonianView,
    /// `sup_x |D_p h(T, x, Dl_T(x), nu_T)|`
    pub m: f64,
    /// `||Lambda||_inf`; `None` uses `c (1 + costate_bound)^2` at `Lip(nu) = 0`.
    pub lambda_sup: Option<f64>,
}

/// Aggregates independent of `K`, fitted from probes of `K~1, K~2` in
/// `u = c1 (K1 + K2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BFit {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub b5: f64,
    pub b6: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub input: ChainInput,
    pub lip_nu: f64,
    pub c_cn1: f64,
    pub c_cn2: f64,
    pub c_kn2: f64,
    pub theta: f64,
    pub m: f64,
    pub delta: f64,
    pub b_1: f64,
    pub c_1: f64,
    pub costate_bound: f64,
    pub lambda_sup: f64,
    pub lip_p: f64,
    pub lip_x: f64,
    pub k_tilde1: f64,
    pub k_tilde2: f64,
}

/// `(name, value, formula)` rows for reports.
pub type LedgerRow = (&'static str, f64, &'static str);

impl DerivedConstants {
    pub fn ledger(&self) -> Vec<LedgerRow> {
        vec![
            ("lip_nu", self.lip_nu, "Lip(nu) = K1 + K2"),
            ("C(c,n1)", self.c_cn1, "n1 + c"),
            ("C(c,n2)", self.c_cn2, "n2 + c"),
            ("C(k2,n2)", self.c_kn2, "n2 + 1.5 k2"),
            ("theta", self.theta, "T [C(c,n1) + n1 + 2 sup|l_T|]"),
            ("m", self.m, "sup_X |D_p h(T, x, Dl_T(x), nu_T)|"),
            ("delta", self.delta, "min{1/(2 m c), 1}"),
            ("B1", self.b_1, "kappa1 + c1 Lip(nu)"),
            ("C1", self.c_1, "8c + 8c sup|Dl_T|^2 + 2 k2 + B1 (T + 4 c theta)"),
            ("costate_bound", self.costate_bound, "2 sqrt(c C1) / delta"),
            ("lambda_sup", self.lambda_sup, "c (1 + costate_bound(Lip(nu)=0))^2 unless given"),
            ("lip_p", self.lip_p, "C(k2,n2)(1 + 4 c C1 / delta^2) + ||Lambda||"),
            ("lip_x", self.lip_x, "C(c,n2)(1 + costate_bound)"),
            ("K~1", self.k_tilde1, "C(c,n2)(1 + costate_bound)"),
            (
                "K~2",
                self.k_tilde2,
                "c sqrt(d) Lip(p) + (1 + q)(1 + k2 C(c,n2)(1 + q)) + c2 Lip(nu), q = costate_bound",
            ),
        ]
    }
}

fn delta_of(m: f64, c: f64) -> f64 {
    if m <= 0.0 {
        1.0
    } else {
        (1.0 / (2.0 * m * c)).min(1.0)
    }
}

/// Evaluates every display of the chain at coupling load `u = c1 Lip(nu)` and
/// `Lip(nu) = s`.
pub fn evaluate_chain(input: &ChainInput, u: f64, s: f64) -> DerivedConstants {
    let k = input.lagrangian;
    let h = input.hamiltonian;
    let tb = input.terminal;
    let t = input.t_final;
    let c = k.c;
    let c_cn1 = k.n1 + c;
    let c_cn2 = h.n2 + c;
    let c_kn2 = h.n2 + 1.5 * h.k2;
    let theta = t * (c_cn1 + k.n1 + 2.0 * tb.sup_value);
    let delta = delta_of(input.m, c);
    let c1_at = |b1: f64| 8.0 * c + 8.0 * c * tb.sup_grad * tb.sup_grad + 2.0 * h.k2 + b1 * (t + 4.0 * c * theta);
    let b_1 = k.kappa1 + u;
    let c_1 = c1_at(b_1);
    let costate = |c1v: f64| 2.0 * (c * c1v).sqrt() / delta;
    let q = costate(c_1);
    let lambda_sup = input.lambda_sup.unwrap_or_else(|| {
        let q0 = costate(c1_at(k.kappa1));
        c * (1.0 + q0) * (1.0 + q0)
    });
    let lip_p = c_kn2 * (1.0 + 4.0 * c * c_1 / (delta * delta)) + lambda_sup;
    let lip_x = c_cn2 * (1.0 + q);
    let c2 = h.c2;
    let k_tilde2 = c * (input.dim as f64).sqrt() * lip_p + (1.0 + q) * (1.0 + h.k2 * c_cn2 * (1.0 + q)) + c2 * s;
    DerivedConstants {
        input: *input,
        lip_nu: s,
        c_cn1,
        c_cn2,
        c_kn2,
        theta,
        m: input.m,
        delta,
        b_1,
        c_1,
        costate_bound: q,
        lambda_sup,
        lip_p,
        lip_x,
        k_tilde1: lip_x,
        k_tilde2,
    }
}

/// Samples `m` on a 64-per-axis grid of the working box, refines the best
/// node by golden section per axis, and maximizes over a few measures.
pub fn terminal_gradient_sup(
    model: &dyn Lagrangian,
    terminal: &dyn TerminalCost,
    domain: &Domain,
    seed: u64,
) -> f64 {
    let d = model.dim();
    let tf = model.horizon();
    let (lo, hi) = domain.working_box();
    let centre = domain.centre();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut measures = vec![JointMeasure::dirac(centre.clone(), vec![0.0; d])];
    for _ in 0..8 {
        measures.push(random_joint_measure(&mut rng, domain, 3, 3.0));
    }
    let eval = |x: &[f64], nu: &JointMeasure| -> f64 {
        let s = model.summarize(nu);
        let mu = crate::measures::state_marginal(nu);
        let ts = terminal.summarize(&mu);
        let mut p = vec![0.0; d];
        terminal.grad(x, &ts, &mut p);
        dp_hamiltonian(model, tf, x, &p, &s).map(|v| norm(&v)).unwrap_or(f64::INFINITY)
    };
    let n = 64usize;
    let total = n.pow(d as u32);
    let mut best = (f64::MIN, vec![0.0; d]);
    let mut x = vec![0.0; d];
    for idx in 0..total {
        let mut r = idx;
        for k in 0..d {
            let i = r % n;
            r /= n;
            x[k] = lo[k] + (hi[k] - lo[k]) * i as f64 / (n - 1) as f64;
        }
        let val = eval(&x, &measures[0]);
        if val > best.0 {
            best = (val, x.clone());
        }
    }
    let mut sup = best.0;
    for nu in &measures {
        let mut y = best.1.clone();
        for k in 0..d {
            let cell = (hi[k] - lo[k]) / (n - 1) as f64;
            let (mut a, mut b) = ((y[k] - cell).max(lo[k]), (y[k] + cell).min(hi[k]));
            let g = 0.618_033_988_749_895;
            for _ in 0..60 {
                let m1 = b - g * (b - a);
                let m2 = a + g * (b - a);
                let mut y1 = y.clone();
                y1[k] = m1;
                let mut y2 = y.clone();
                y2[k] = m2;
                if eval(&y1, nu) > eval(&y2, nu) {
                    b = m2;
                } else {
                    a = m1;
                }
            }
            let mut cand = y.clone();
            cand[k] = 0.5 * (a + b);
            if eval(&cand, nu) > eval(&y, nu) {
                y = cand;
            }
        }
        sup = sup.max(eval(&y, nu)).max(eval(&best.1, nu));
    }
    sup
}

/// Samples the model and terminal into a [`ChainInput`].
pub fn chain_input(
    model: &dyn Lagrangian,
    terminal: &dyn TerminalCost,
    domain: &Domain,
    lambda_sup: Option<f64>,
    seed: u64,
) -> ChainInput {
    ChainInput {
        dim: model.dim(),
        t_final: model.horizon(),
        lagrangian: model.constants(),
        terminal: terminal.bounds(),
        hamiltonian: hamiltonian_view(model, domain, 1000, seed),
        m: terminal_gradient_sup(model, terminal, domain, seed),
        lambda_sup,
    }
}

/// All displays at `Lip(nu) = lip_nu`.
pub fn compute_base(
    model: &dyn Lagrangian,
    terminal: &dyn TerminalCost,
    domain: &Domain,
    lip_nu: f64,
) -> DerivedConstants {
    let input = chain_input(model, terminal, domain, None, 0);
    evaluate_chain(&input, input.lagrangian.c1 * lip_nu, lip_nu)
}

/// `(K~1, K~2)` at `Lip(nu) = K1 + K2`.
pub fn k_tilde(constants: &DerivedConstants, budget: &KBudget) -> (f64, f64) {
    let s = budget.k1 + budget.k2;
    let r = evaluate_chain(&constants.input, constants.input.lagrangian.c1 * s, s);
    (r.k_tilde1, r.k_tilde2)
}

/// Relative margin added to `b5` so that `K~2 < K2` stays strict.
const B5_MARGIN: f64 = 1e-9;

/// Recovers `b1..b6` from probes at `u = 0, 1, 4`, checked at `u = 9`.
pub fn fit_b(input: &ChainInput) -> BFit {
    let at = |u: f64| evaluate_chain(input, u, 0.0);
    let (e0, e1, e4, e9) = (at(0.0), at(1.0), at(4.0), at(9.0));
    let (f0, f1, f4) = (e0.k_tilde1, e1.k_tilde1, e4.k_tilde1);
    let target = (f4 - f1) / (f1 - f0);
    let ratio = |b: f64| ((b + 4.0).sqrt() - (b + 1.0).sqrt()) / ((b + 1.0).sqrt() - b.sqrt());
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while ratio(hi) < target && hi < 1e300 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let b4 = 0.5 * (lo + hi);
    let r = |u: f64| (b4 + u).sqrt();
    let b3 = (f1 - f0) / (r(1.0) - r(0.0));
    let b2 = f0 - b3 * r(0.0);

    // E(u) = alpha + beta sqrt(b4 + u) + gamma u
    let a = nalgebra::Matrix3::new(1.0, r(0.0), 0.0, 1.0, r(1.0), 1.0, 1.0, r(4.0), 4.0);
    let rhs = nalgebra::Vector3::new(e0.k_tilde2, e1.k_tilde2, e4.k_tilde2);
    let sol = a.lu().solve(&rhs).expect("probe system is regular");
    let (alpha, beta, gamma) = (sol[0], sol[1], sol[2]);
    let check = alpha + beta * r(9.0) + gamma * 9.0;
    debug_assert!((check - e9.k_tilde2).abs() <= 1e-8 * e9.k_tilde2.abs().max(1.0));
    let b5 = (alpha + beta * r(0.0)) * (1.0 + B5_MARGIN);
    let b6 = beta / (2.0 * r(0.0)) + gamma;
    BFit { b1: e0.c_1, b2, b3, b4, b5, b6 }
}

/// Doubling search for `K1` on the strict inequality, then the closed form for `K2`.
pub fn solve_budget_from_input(input: &ChainInput) -> Result<(KBudget, BFit), ConstantsError> {
    let c1 = input.lagrangian.c1;
    let c2 = input.hamiltonian.c2;
    if c1 >= 1.0 {
        return Err(ConstantsError::SmallnessViolated { c1, rate: f64::NAN });
    }
    let fit = fit_b(input);
    let rate = fit.b6 * c1 + c2;
    if rate >= 1.0 {
        return Err(ConstantsError::SmallnessViolated { c1, rate });
    }
    let k2_of = |k1: f64| (fit.b5 + rate * k1) / (1.0 - rate);
    let mut k1 = 1.0f64;
    while k1 <= 2f64.powi(60) {
        let k2 = k2_of(k1);
        let lhs = fit.b2 + fit.b3 * (fit.b4 + c1 * (k1 + k2)).sqrt();
        if lhs < k1 {
            let s = k1 + k2;
            let r = evaluate_chain(input, c1 * s, s);
            if r.k_tilde1 < k1 && r.k_tilde2 < k2 {
                return Ok((KBudget { k1, k2 }, fit));
            }
        }
        k1 *= 2.0;
    }
    Err(ConstantsError::NoBudget)
}

/// Samples the data, fits `b2..b6` and solves for `K`; returns the ledger at the budget.
pub fn solve_k_budget(
    model: &dyn Lagrangian,
    terminal: &dyn TerminalCost,
    domain: &Domain,
) -> Result<(KBudget, DerivedConstants, BFit), ConstantsError> {
    let input = chain_input(model, terminal, domain, None, 0);
    let (k, fit) = solve_budget_from_input(&input)?;
    let s = k.k1 + k.k2;
    let at = evaluate_chain(&input, input.lagrangian.c1 * s, s);
    assert!(at.k_tilde1 < k.k1 && at.k_tilde2 < k.k2, "budget post-condition");
    Ok((k, at, fit))
}
