use mfgc::constants::*;
use mfgc::geometry::Domain;
use mfgc::lagrangian::{HamiltonianView, LagrangianConstants, QuadraticModel, Terminal, TerminalBounds};

fn frozen() -> ChainInput {
    ChainInput {
        dim: 2,
        t_final: 1.0,
        lagrangian: LagrangianConstants { n1: 1.0, c: 2.0, k1: 1.0, c1: 0.01, kappa1: 1.0 },
        terminal: TerminalBounds { sup_value: 1.0, sup_grad: 1.0, c1: 0.0 },
        hamiltonian: HamiltonianView { n2: 0.0, k2: 0.0, c2: 0.02, kappa2: 0.0 },
        m: 1.0,
        lambda_sup: None,
    }
}

/// Independent re-derivation, one display at a time.
fn oracle(i: &ChainInput, lip_nu: f64) -> (f64, f64) {
    let (n1, c, kappa1, c1) = (i.lagrangian.n1, i.lagrangian.c, i.lagrangian.kappa1, i.lagrangian.c1);
    let (n2, k2, c2) = (i.hamiltonian.n2, i.hamiltonian.k2, i.hamiltonian.c2);
    let t = i.t_final;
    let theta = t * ((n1 + c) + n1 + 2.0 * i.terminal.sup_value);
    let delta = if i.m == 0.0 { 1.0 } else { f64::min(1.0 / (2.0 * i.m * c), 1.0) };
    let big_c1 = |b1: f64| {
        8.0 * c + 8.0 * c * i.terminal.sup_grad.powi(2) + 2.0 * k2 + b1 * (t + 4.0 * c * theta)
    };
    let c1v = big_c1(kappa1 + c1 * lip_nu);
    let p_bound = 2.0 * (c * c1v).sqrt() / delta;
    let p0 = 2.0 * (c * big_c1(kappa1)).sqrt() / delta;
    let lambda = i.lambda_sup.unwrap_or(c * (1.0 + p0).powi(2));
    let lip_p = (n2 + 1.5 * k2) * (1.0 + 4.0 * c * c1v / delta.powi(2)) + lambda;
    let kt1 = (n2 + c) * (1.0 + p_bound);
    let kt2 = c * (i.dim as f64).sqrt() * lip_p
        + (1.0 + p_bound) * (1.0 + k2 * (n2 + c) * (1.0 + p_bound))
        + c2 * lip_nu;
    (kt1, kt2)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

#[test]
fn frozen_theta_and_delta() {
    let r = evaluate_chain(&frozen(), 0.0, 0.0);
    assert_eq!(r.theta, 6.0);
    assert_eq!(r.delta, 0.25);
    assert_eq!(r.c_1, 81.0);
    assert_eq!(r.c_cn1, 3.0);
}

#[test]
fn quadratic_model_gives_unit_m() {
    let disk = Domain::unit_disk();
    let model = QuadraticModel::quadratic(2, 1.0, &disk);
    let m = terminal_gradient_sup(&model, &Terminal::sine(), &disk, 0);
    assert!((m - 1.0).abs() < 1e-12);
    let mut input = frozen();
    input.m = m;
    assert_eq!(evaluate_chain(&input, 0.0, 0.0).delta, 0.25);
}

#[test]
fn zero_m_caps_delta() {
    let mut input = frozen();
    input.m = 0.0;
    assert_eq!(evaluate_chain(&input, 0.0, 0.0).delta, 1.0);
}

#[test]
fn chain_matches_independent_derivation() {
    let mut inputs = vec![frozen()];
    let mut other = frozen();
    other.hamiltonian = HamiltonianView { n2: 0.3, k2: 0.7, c2: 0.02, kappa2: 0.1 };
    other.lambda_sup = Some(17.0);
    other.dim = 3;
    other.m = 0.1;
    inputs.push(other);
    for input in &inputs {
        for s in [0.0, 1.0, 37.5, 1e4, 9.3e4] {
            let k = KBudget::new(s * 0.25, s * 0.75);
            let dc = evaluate_chain(input, 0.0, 0.0);
            let (a1, a2) = k_tilde(&dc, &k);
            let (o1, o2) = oracle(input, s);
            assert!(rel(a1, o1) < 1e-10, "{a1} vs {o1}");
            assert!(rel(a2, o2) < 1e-10, "{a2} vs {o2}");
        }
    }
}

#[test]
fn decoupled_k_tilde_is_constant() {
    let mut input = frozen();
    input.lagrangian.c1 = 0.0;
    input.hamiltonian.c2 = 0.0;
    let dc = evaluate_chain(&input, 0.0, 0.0);
    let a = k_tilde(&dc, &KBudget::new(1.0, 1.0));
    let b = k_tilde(&dc, &KBudget::new(1e6, 3e7));
    assert_eq!(a, b);
}

#[test]
fn doubling_load_increases_k_tilde1() {
    let dc = evaluate_chain(&frozen(), 0.0, 0.0);
    let mut k = KBudget::new(0.5, 0.5);
    let mut prev = k_tilde(&dc, &k);
    for _ in 0..40 {
        k = KBudget::new(2.0 * k.k1, 2.0 * k.k2);
        let next = k_tilde(&dc, &k);
        assert!(next.0 > prev.0 && next.1 > prev.1, "{prev:?} -> {next:?} at {k:?}");
        prev = next;
    }
}

#[test]
fn fitted_forms_reproduce_chain() {
    let input = frozen();
    let f = fit_b(&input);
    let c1 = input.lagrangian.c1;
    let c2 = input.hamiltonian.c2;
    for s in [0.0, 3.0, 250.0, 1e5] {
        let (o1, o2) = oracle(&input, s);
        let fitted1 = f.b2 + f.b3 * (f.b4 + c1 * s).sqrt();
        assert!(rel(fitted1, o1) < 1e-10);
        assert!(o2 < f.b5 + (f.b6 * c1 + c2) * s);
    }
    assert_eq!(f.b1, 81.0);
}

#[test]
fn frozen_budget_satisfies_strict_inequalities() {
    let input = frozen();
    let (k, f) = solve_budget_from_input(&input).unwrap();
    let (kt1, kt2) = oracle(&input, k.k1 + k.k2);
    assert!(kt1 < k.k1 && kt2 < k.k2, "{kt1} {kt2} vs {k:?}");
    assert!(f.b6 * 0.01 + 0.02 < 1.0);
    let again = solve_budget_from_input(&input).unwrap();
    assert_eq!(again.0, k);
}

#[test]
fn decoupled_budget_exists() {
    let mut input = frozen();
    input.lagrangian.c1 = 0.0;
    input.hamiltonian.c2 = 0.0;
    let (k, _) = solve_budget_from_input(&input).unwrap();
    let (kt1, kt2) = oracle(&input, k.k1 + k.k2);
    assert!(kt1 < k.k1 && kt2 < k.k2);
}

#[test]
fn strong_coupling_violates_smallness() {
    let mut input = frozen();
    input.lagrangian.c1 = 0.9;
    input.hamiltonian.c2 = 1.8;
    assert!(matches!(solve_budget_from_input(&input), Err(ConstantsError::SmallnessViolated { .. })));
    input.lagrangian.c1 = 1.0;
    input.hamiltonian.c2 = 0.0;
    assert!(matches!(solve_budget_from_input(&input), Err(ConstantsError::SmallnessViolated { .. })));
}

#[test]
fn congestion_preset_budget() {
    let interval = Domain::preset("interval").unwrap();
    let model = QuadraticModel::congestion(1, 0.01, 1.0, 1.0, &interval);
    let terminal = Terminal::target(0.08, vec![1.3], &interval);
    let (k, dc, _) = solve_k_budget(&model, &terminal, &interval).unwrap();
    let (kt1, kt2) = oracle(&dc.input, k.k1 + k.k2);
    assert!(kt1 < k.k1 && kt2 < k.k2);
}

#[test]
fn closed_forms_are_exact() {
    let input = frozen();
    for s in [0.0, 10.0, 1234.5] {
        let r = evaluate_chain(&input, input.lagrangian.c1 * s, s);
        let c = input.lagrangian.c;
        assert_eq!(r.delta, f64::min(1.0 / (2.0 * r.m * c), 1.0));
        assert_eq!(r.b_1, input.lagrangian.kappa1 + input.lagrangian.c1 * s);
        assert_eq!(r.costate_bound, 2.0 * (c * r.c_1).sqrt() / r.delta);
        let c1 = 8.0 * c + 8.0 * c * 1.0 + 2.0 * 0.0 + r.b_1 * (1.0 + 4.0 * c * r.theta);
        assert_eq!(r.c_1, c1);
    }
}

#[test]
fn chain_is_monotone_in_declared_constants() {
    let base = frozen();
    let s = 500.0;
    let eval = |i: &ChainInput| {
        let r = evaluate_chain(i, i.lagrangian.c1 * s, s);
        [r.theta, r.c_1, r.k_tilde1, r.k_tilde2]
    };
    type Tweak = fn(&mut ChainInput, f64);
    let tweaks: [(&str, Tweak); 9] = [
        ("n1", |i, f| i.lagrangian.n1 *= f),
        ("c", |i, f| i.lagrangian.c *= f),
        ("kappa1", |i, f| i.lagrangian.kappa1 *= f),
        ("c1", |i, f| i.lagrangian.c1 *= f),
        ("sup_value", |i, f| i.terminal.sup_value *= f),
        ("sup_grad", |i, f| i.terminal.sup_grad *= f),
        ("n2", |i, f| i.hamiltonian.n2 = (i.hamiltonian.n2 + 0.1) * f),
        ("k2", |i, f| i.hamiltonian.k2 = (i.hamiltonian.k2 + 0.1) * f),
        ("m", |i, f| i.m *= f),
    ];
    for (name, tweak) in tweaks {
        let mut lo = base;
        tweak(&mut lo, 0.9);
        let mut hi = base;
        tweak(&mut hi, 1.1);
        let (a, b) = (eval(&lo), eval(&hi));
        for (x, y) in a.iter().zip(&b) {
            assert!(x <= y, "{name}: {a:?} vs {b:?}");
        }
    }
}
