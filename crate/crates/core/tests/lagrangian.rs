use mfgc::geometry::Domain;
use mfgc::lagrangian::*;
use mfgc::measures::{wasserstein1, JointAtom, JointMeasure, W1Backend};
use proptest::prelude::*;

fn disk() -> Domain {
    Domain::unit_disk()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Golden-section maximum of a unimodal function on `[lo, hi]`.
fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..120 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if f(a) > f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    f(0.5 * (lo + hi))
}

#[test]
fn legendre_self_dual_quadratic() {
    let m = QuadraticModel::quadratic(2, 1.0, &disk());
    let (h, v) = legendre_transform(&m, 0.0, &[0.0, 0.0], &[3.0, 4.0], &vec![]).unwrap();
    assert!((h - 12.5).abs() < 1e-10);
    assert!(close(&v, &[3.0, 4.0], 1e-10));
}

#[test]
fn legendre_completed_square() {
    let m = QuadraticModel::shifted(vec![1.0, 0.0], 1.0, &disk());
    let (h, v) = legendre_transform(&m, 0.0, &[0.0, 0.0], &[0.0, 2.0], &vec![]).unwrap();
    assert!((h - 2.0).abs() < 1e-10);
    assert!(close(&v, &[1.0, 2.0], 1e-10));
}

#[test]
fn legendre_diagonal_matches_grid_search() {
    let m = QuadraticModel::diagonal(vec![1.0, 2.0], 1.0, &disk());
    let p = [0.0, 2.0];
    let (h, v) = legendre_transform(&m, 0.0, &[0.0, 0.0], &p, &vec![]).unwrap();
    // brute-force sup over [-5,5]^2 with step 1e-3
    let n = 10_000;
    let mut best = f64::MIN;
    let mut arg = [0.0, 0.0];
    for i in 0..=n {
        let v1 = -5.0 + i as f64 * 1e-3;
        for j in 0..=n {
            let v2 = -5.0 + j as f64 * 1e-3;
            let val = p[0] * v1 + p[1] * v2 - 0.5 * (v1 * v1 + 2.0 * v2 * v2);
            if val > best {
                best = val;
                arg = [v1, v2];
            }
        }
    }
    assert!((best - 1.0).abs() < 1e-3);
    assert!((h - best).abs() < 1e-3);
    assert!(close(&v, &arg, 2e-3));
    assert!(close(&v, &[0.0, 1.0], 1e-10));
}

#[test]
fn dp_hamiltonian_examples() {
    let q = QuadraticModel::quadratic(2, 1.0, &disk());
    let v = dp_hamiltonian(&q, 0.3, &[0.1, 0.2], &[-1.5, 0.25], &vec![]).unwrap();
    assert!(close(&v, &[-1.5, 0.25], 1e-12));
    let s = QuadraticModel::shifted(vec![0.5, -0.25], 1.0, &disk());
    let v = dp_hamiltonian(&s, 0.0, &[0.0, 0.0], &[0.0, 0.0], &vec![]).unwrap();
    assert!(close(&v, &[0.5, -0.25], 1e-12));
    let g = QuadraticModel::diagonal(vec![1.0, 2.0], 1.0, &disk());
    let v = dp_hamiltonian(&g, 0.0, &[0.0, 0.0], &[0.0, 2.0], &vec![]).unwrap();
    assert!(close(&v, &[0.0, 1.0], 1e-12));
}

#[test]
fn legendre_of_linear_cost_fails() {
    let m = LinearModel { slope: vec![1.0, 0.0], t_final: 1.0, declared: LagrangianConstants::FLOOR };
    assert!(matches!(
        legendre_transform(&m, 0.0, &[0.0, 0.0], &[0.0, 1.0], &vec![]),
        Err(LagrangianError::NoConvergence { .. })
    ));
}

#[test]
fn congestion_model_passes_all_hypotheses() {
    let d = disk();
    let m = QuadraticModel::congestion(2, 0.01, 1.0, 1.0, &d);
    let report = verify_hypotheses(&m, &Terminal::sine(), &d, 1000, 7);
    for r in &report.rows {
        assert!(r.pass, "{} ratio {}", r.hypothesis, r.worst_ratio);
    }
    // the coupling is active, so the measure rows see nonzero ratios
    assert!(report.row("L-ii(b) l measure-Lipschitz").unwrap().worst_ratio > 0.0);
}

#[test]
fn linear_cost_fails_lower_hessian() {
    let m = LinearModel { slope: vec![1.0, -1.0], t_final: 1.0, declared: LagrangianConstants::FLOOR };
    let report = verify_hypotheses(&m, &Terminal::zero(), &disk(), 1000, 1);
    assert!(!report.row("L-ii(a) lower Hessian").unwrap().pass);
    assert!(report.row("L-ii(a) upper Hessian").unwrap().pass);
}

#[test]
fn halved_n1_fails_bound_at_zero_velocity() {
    let d = disk();
    let mut m = QuadraticModel::shifted(vec![1.0, 0.0], 1.0, &d);
    let honest = verify_hypotheses(&m, &Terminal::zero(), &d, 1000, 3);
    assert!(honest.row("L-i bound at v=0").unwrap().pass);
    m.declared.n1 *= 0.5;
    let report = verify_hypotheses(&m, &Terminal::zero(), &d, 1000, 3);
    let row = report.row("L-i bound at v=0").unwrap();
    assert!(!row.pass);
    assert!(row.worst_ratio > 1.9);
}

#[test]
fn understated_terminal_bound_fails() {
    let d = disk();
    let mut t = Terminal::target(1.0, vec![2.0, 0.0], &d);
    t.declared.sup_grad = 1.0;
    let m = QuadraticModel::quadratic(2, 1.0, &d);
    let report = verify_hypotheses(&m, &t, &d, 1000, 5);
    assert!(!report.row("T-i sup Dl_T").unwrap().pass);
    assert!(report.row("T-i sup l_T").unwrap().pass);
}

#[test]
fn derived_bounds_examples() {
    let k = LagrangianConstants { n1: 1.0, c: 2.0, k1: 1.0, c1: 0.0, kappa1: 1.0 };
    let h = HamiltonianView { n2: 0.0, k2: 0.0, c2: 0.0, kappa2: 0.0 };
    let (ccn1, ckn1, _, _) = derived_derivative_bounds(&k, &h);
    assert_eq!(ccn1, 3.0);
    assert_eq!(ckn1, 2.5);

    let d = disk();
    let q = QuadraticModel::quadratic(2, 1.0, &d);
    let mut worst: f64 = 0.0;
    let mut g = [0.0; 2];
    for i in 0..2000 {
        let a = i as f64 * 0.37;
        let r = (i % 50) as f64 * 0.2;
        let v = [r * a.cos(), r * a.sin()];
        q.grad_v(0.0, &[0.0, 0.0], &v, &vec![], &mut g);
        worst = worst.max((g[0].hypot(g[1])) / (1.0 + v[0].hypot(v[1])));
    }
    assert!(worst <= 1.0 && worst < ccn1);
}

#[test]
fn hamiltonian_view_of_congestion_model() {
    let d = disk();
    let m = QuadraticModel::congestion(2, 0.01, 1.0, 1.0, &d);
    let hv = hamiltonian_view(&m, &d, 500, 11);
    assert_eq!(hv.c2, 0.01 * m.constants().c);
    assert_eq!(hv.k2, 0.0);
    assert!(hv.n2 > 0.0 && hv.n2 <= 1.25 * 0.01 * (1.0 + BUMP_LIP) + 1e-12);
    assert!(hv.kappa2 < 1e-9);
}

fn measure(xs: &[(f64, f64, f64, f64, f64)]) -> JointMeasure {
    let total: f64 = xs.iter().map(|a| a.4).sum();
    JointMeasure {
        atoms: xs
            .iter()
            .map(|a| JointAtom { x: vec![a.0, a.1], v: vec![a.2, a.3], weight: a.4 / total })
            .collect(),
    }
}

fn atoms() -> impl Strategy<Value = Vec<(f64, f64, f64, f64, f64)>> {
    prop::collection::vec((-0.7f64..0.7, -0.7f64..0.7, -2.0f64..2.0, -2.0f64..2.0, 0.1f64..1.0), 1..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fenchel_young_inequality(
        px in -5.0f64..5.0, py in -5.0f64..5.0,
        vx in -5.0f64..5.0, vy in -5.0f64..5.0,
        x0 in -0.7f64..0.7, x1 in -0.7f64..0.7,
        nu in atoms(),
    ) {
        let d = disk();
        let m = QuadraticModel::congestion(2, 0.01, 0.5, 1.0, &d);
        let s = m.summarize(&measure(&nu));
        let x = [x0, x1];
        let p = [px, py];
        let (h, vstar) = legendre_transform(&m, 0.5, &x, &p, &s).unwrap();
        let v = [vx, vy];
        prop_assert!(h + m.value(0.5, &x, &v, &s) >= px * vx + py * vy - 1e-12);
        let eq = h + m.value(0.5, &x, &vstar, &s) - (px * vstar[0] + py * vstar[1]);
        prop_assert!(eq.abs() < 1e-8);
    }

    #[test]
    fn biconjugate_recovers_cost(
        vx in -3.0f64..3.0, vy in -3.0f64..3.0,
        ax in -1.0f64..1.0, ay in -1.0f64..1.0,
    ) {
        let d = disk();
        let m = QuadraticModel::shifted(vec![ax, ay], 1.0, &d);
        let x = [0.2, -0.1];
        let v = [vx, vy];
        let s: Stats = vec![];
        let h = |p: &[f64]| legendre_transform(&m, 0.0, &x, p, &s).unwrap().0;
        let outer = |p0: f64| golden_max(|p1| p0 * vx + p1 * vy - h(&[p0, p1]), -20.0, 20.0);
        let sup = golden_max(outer, -20.0, 20.0);
        prop_assert!((sup - m.value(0.0, &x, &v, &s)).abs() < 1e-6);
    }

    #[test]
    fn maximizer_transfers_measure_lipschitz(
        px in -5.0f64..5.0, py in -5.0f64..5.0,
        a in atoms(), b in atoms(),
    ) {
        let d = disk();
        let m = QuadraticModel::congestion(2, 0.01, 1.0, 1.0, &d);
        let (n1, n2) = (measure(&a), measure(&b));
        let x = [0.1, 0.3];
        let va = dp_hamiltonian(&m, 0.0, &x, &[px, py], &m.summarize(&n1)).unwrap();
        let vb = dp_hamiltonian(&m, 0.0, &x, &[px, py], &m.summarize(&n2)).unwrap();
        let w1 = wasserstein1(&n1, &n2, W1Backend::Flow).unwrap();
        let k = m.constants();
        prop_assert!((va[0] - vb[0]).hypot(va[1] - vb[1]) <= k.c1 * k.c * w1 + 1e-12);
        let dl = (m.value(0.0, &x, &[px, py], &m.summarize(&n1)) - m.value(0.0, &x, &[px, py], &m.summarize(&n2))).abs();
        prop_assert!(dl <= k.c1 * w1 + 1e-12);
    }
}
