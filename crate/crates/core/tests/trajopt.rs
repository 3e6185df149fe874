use mfgc::constants::KBudget;
use mfgc::geometry::Domain;
use mfgc::lagrangian::{Lagrangian, QuadraticModel, Terminal, TerminalCost};
use mfgc::measures::{push_forward_at_time, wasserstein1, Particle, PathMeasure, W1Backend};
use mfgc::trajopt::*;
use proptest::prelude::*;

const WIDE: KBudget = KBudget { k1: 8.0, k2: 2000.0 };

fn particle(x0: &[f64], u: ControlPath, weight: f64, domain: &Domain) -> Particle {
    Particle { state: rollout(x0, &u, domain), control: u, weight }
}

fn still(x0: &[f64], grid: TimeGrid, domain: &Domain) -> PathMeasure {
    let u = ControlPath::zeros(grid, x0.len());
    PathMeasure::new(grid, x0.len(), vec![particle(x0, u, 1.0, domain)])
}

fn chase() -> (Domain, QuadraticModel, Terminal) {
    let disk = Domain::unit_disk();
    let model = QuadraticModel::quadratic(2, 1.0, &disk);
    let terminal = Terminal::target(1.0, vec![2.0, 0.0], &disk);
    (disk, model, terminal)
}

fn hugging() -> (Domain, QuadraticModel, Terminal) {
    let disk = Domain::unit_disk();
    let model = QuadraticModel::radial(2, 4.0, 1.0, &disk);
    let a = 1.5 * std::f64::consts::FRAC_1_SQRT_2;
    let terminal = Terminal::target(0.5, vec![a, a], &disk);
    (disk, model, terminal)
}

#[test]
fn rollout_examples() {
    let disk = Domain::unit_disk();
    let grid = TimeGrid::new(1.0, 200);
    let x = rollout(&[0.0, 0.0], &ControlPath::constant(grid, &[1.0, 0.0]), &disk);
    assert!((x.endpoint()[0] - 1.0).abs() < 1e-12 && x.endpoint()[1] == 0.0);
    assert!(x.feasible);
    let y = rollout(&[0.5, 0.0], &ControlPath::constant(grid, &[1.0, 0.0]), &disk);
    assert!(!y.feasible);
    let first_out = (0..=200).find(|&i| disk.signed_distance(y.node(i)) < -1e-9).unwrap();
    assert!((grid.time(first_out) - 0.5).abs() <= grid.dt() + 1e-12);
    let z = rollout(&[0.3, -0.2], &ControlPath::zeros(grid, 2), &disk);
    assert!((0..=200).all(|i| z.node(i) == [0.3, -0.2]));
}

#[test]
fn cost_examples() {
    let (disk, model, _) = chase();
    let grid = TimeGrid::new(1.0, 200);
    let eta = still(&[0.0, 0.0], grid, &disk);
    let u = ControlPath::constant(grid, &[1.0, 0.0]);
    let c = total_cost(&[0.0, 0.0], &u, &eta, &model, &Terminal::zero(), &disk).unwrap();
    assert!((c - 0.5).abs() < 1e-12);
    let z = ControlPath::zeros(grid, 2);
    assert_eq!(total_cost(&[0.1, 0.2], &z, &eta, &model, &Terminal::zero(), &disk).unwrap(), 0.0);
    let other = ControlPath::zeros(TimeGrid::new(1.0, 100), 2);
    assert_eq!(
        total_cost(&[0.0, 0.0], &other, &eta, &model, &Terminal::zero(), &disk),
        Err(TrajError::GridMismatch)
    );
}

/// Independent quadrature on `4N` sub-nodes: exact states of the piecewise-linear
/// control, interpolated particles, first moments computed here.
fn refined_cost(x0: &[f64], u: &ControlPath, eta: &PathMeasure, model: &QuadraticModel, terminal: &Terminal, domain: &Domain) -> f64 {
    let fine = 4 * u.grid.n;
    let h = u.grid.t_final / fine as f64;
    let x = rollout(x0, u, domain);
    let mut total = 0.0;
    for j in 0..=fine {
        let t = j as f64 * h;
        let nu = push_forward_at_time(eta, t);
        let mut s = vec![0.0; 4];
        for a in &nu.atoms {
            for k in 0..2 {
                s[k] += a.weight * a.x[k];
                s[2 + k] += a.weight * a.v[k];
            }
        }
        let w = if j == 0 || j == fine { 0.5 * h } else { h };
        total += w * model.value(t, &x.at_time(t), &u.at_time(t), &s);
    }
    total + terminal.value(x.endpoint(), &vec![])
}

#[test]
fn congestion_cost_matches_refined_quadrature() {
    let disk = Domain::unit_disk();
    let model = QuadraticModel::congestion(2, 0.01, 0.5, 1.0, &disk);
    let terminal = Terminal::target(0.3, vec![0.2, 0.1], &disk);
    let grid = TimeGrid::new(1.0, 200);
    let p = |x0: [f64; 2], a: f64, b: f64, w: f64| {
        let u = ControlPath::from_fn(grid, 2, |t| vec![a * (1.0 - t), b * t]);
        particle(&x0, u, w, &disk)
    };
    let eta = PathMeasure::new(
        grid,
        2,
        vec![p([0.1, 0.0], 0.3, -0.2, 0.5), p([-0.4, 0.2], 0.1, 0.4, 0.3), p([0.0, -0.5], -0.2, 0.2, 0.2)],
    );
    let u = ControlPath::from_fn(grid, 2, |t| vec![0.4 - 0.3 * t, 0.2 * t * t]);
    let x0 = [0.05, 0.1];
    let c = total_cost(&x0, &u, &eta, &model, &terminal, &disk).unwrap();
    let oracle = refined_cost(&x0, &u, &eta, &model, &terminal, &disk);
    assert!((c - oracle).abs() < 1e-6, "{c} vs {oracle}");
}

#[test]
fn target_chase_reaches_the_boundary_point() {
    let (disk, model, terminal) = chase();
    let grid = TimeGrid::new(1.0, 200);
    let eta = still(&[0.0, 0.0], grid, &disk);
    let br = best_response(&[0.0, 0.0], &eta, &WIDE, &model, &terminal, &disk, &BrOptions::default()).unwrap();
    let end = br.state.endpoint();
    assert!((end[0] - 1.0).abs() < 1e-2 && end[1].abs() < 1e-2, "{end:?}");
    assert!((br.cost - 1.5).abs() < 1e-6);
    assert!(br.state.feasible);
    assert!(br.control.within_budget(&WIDE, 0.0));
    assert!(br.stationarity < 1e-6);
    assert!(!br.stalled);
}

#[test]
fn target_chase_agrees_with_lattice_oracle() {
    let (disk, model, terminal) = chase();
    let grid = TimeGrid::new(1.0, 200);
    let eta = still(&[0.0, 0.0], grid, &disk);
    let br = best_response(&[0.0, 0.0], &eta, &WIDE, &model, &terminal, &disk, &BrOptions::default()).unwrap();
    let oracle = brute_force_best_response(&[0.0, 0.0], &eta, &WIDE, &model, &terminal, &disk, 8, 9).unwrap();
    assert!(br.cost <= oracle.cost + 5e-3, "{} vs {}", br.cost, oracle.cost);
    assert!((br.cost - oracle.cost).abs() < 5e-3);
    assert!(rollout(&[0.0, 0.0], &oracle.control, &disk).feasible);
}

#[test]
fn standing_still_is_optimal_without_terminal_cost() {
    let (disk, model, _) = chase();
    let grid = TimeGrid::new(1.0, 100);
    let x0 = [0.3, -0.4];
    let eta = still(&x0, grid, &disk);
    let br = best_response(&x0, &eta, &WIDE, &model, &Terminal::zero(), &disk, &BrOptions::default()).unwrap();
    assert!(br.control.sup_norm() < 1e-9);
    assert!(br.cost.abs() < 1e-12);
}

#[test]
fn rotating_a_symmetric_response_preserves_cost() {
    let disk = Domain::unit_disk();
    let model = QuadraticModel::radial(2, 1.0, 1.0, &disk);
    let terminal = Terminal::target(0.4, vec![0.0, 0.0], &disk);
    let grid = TimeGrid::new(1.0, 100);
    let x0 = [0.0, 0.0];
    let eta = still(&x0, grid, &disk);
    let opts = BrOptions { seed: 3, ..BrOptions::default() };
    let br = best_response(&x0, &eta, &WIDE, &model, &terminal, &disk, &opts).unwrap();
    for angle in [0.3, 1.7, 4.0] {
        let (c, s) = (f64::cos(angle), f64::sin(angle));
        let mut rot = br.control.clone();
        for i in 0..rot.len() {
            let v = br.control.node(i);
            rot.node_mut(i).copy_from_slice(&[c * v[0] - s * v[1], s * v[0] + c * v[1]]);
        }
        let rc = total_cost(&x0, &rot, &eta, &model, &terminal, &disk).unwrap();
        assert!((rc - br.cost).abs() < 1e-8);
    }
}

#[test]
fn start_outside_the_domain_is_rejected() {
    let (disk, model, terminal) = chase();
    let grid = TimeGrid::new(1.0, 50);
    let eta = still(&[0.0, 0.0], grid, &disk);
    let r = best_response(&[1.2, 0.0], &eta, &WIDE, &model, &terminal, &disk, &BrOptions::default());
    assert!(matches!(r, Err(TrajError::InfeasibleStart(b)) if (b + 0.2).abs() < 1e-12));
}

#[test]
fn tight_budget_is_met_exactly() {
    let (disk, model, terminal) = chase();
    let grid = TimeGrid::new(1.0, 100);
    let eta = still(&[0.0, 0.0], grid, &disk);
    let tight = KBudget::new(0.7, 1.5);
    let br = best_response(&[0.0, 0.0], &eta, &tight, &model, &terminal, &disk, &BrOptions::default()).unwrap();
    assert!(br.control.within_budget(&tight, 0.0));
    assert!(br.control.sup_norm() > 0.69);
    // constant speed 0.7 towards the target is admissible and optimal here
    let line = ControlPath::constant(grid, &[0.7, 0.0]);
    let c = total_cost(&[0.0, 0.0], &line, &eta, &model, &terminal, &disk).unwrap();
    assert!(br.cost <= c + 1e-9);
}

#[test]
fn interior_residual_vanishes_on_the_straight_line() {
    let disk = Domain::unit_disk();
    let model = QuadraticModel::quadratic(2, 1.0, &disk);
    let (w, a, x0) = (1.0, [0.3, 0.2], [-0.1, 0.05]);
    let terminal = Terminal::target(w, a.to_vec(), &disk);
    let grid = TimeGrid::new(1.0, 200);
    let eta = still(&x0, grid, &disk);
    let env = MeanFieldEnv::new(&eta, &model, &terminal);
    let v: Vec<f64> = (0..2).map(|k| 2.0 * w * (a[k] - x0[k]) / (1.0 + 2.0 * w)).collect();
    let exact = ControlPath::constant(grid, &v);
    let el = euler_lagrange_residual(&rollout(&x0, &exact, &disk), &exact, &env, &model, &terminal, &disk);
    assert!(el.max_xdot < 1e-12 && el.max_pdot < 1e-12 && el.terminal < 1e-12);
    assert_eq!(el.beta_hat, 0.0);
    assert!(el.active.iter().all(|a| !a));

    let br = best_response(&x0, &eta, &WIDE, &model, &terminal, &disk, &BrOptions::default()).unwrap();
    let el = euler_lagrange_residual(&br.state, &br.control, &env, &model, &terminal, &disk);
    assert!(el.max_xdot < 1e-4 && el.max_pdot < 1e-4, "{} {}", el.max_xdot, el.max_pdot);
    assert!(el.lip_p < 1e-3);
}

#[test]
fn standing_still_is_not_stationary_in_the_chase() {
    let (disk, model, terminal) = chase();
    let grid = TimeGrid::new(1.0, 200);
    let eta = still(&[0.0, 0.0], grid, &disk);
    let env = MeanFieldEnv::new(&eta, &model, &terminal);
    let u = ControlPath::zeros(grid, 2);
    let el = euler_lagrange_residual(&rollout(&[0.0, 0.0], &u, &disk), &u, &env, &model, &terminal, &disk);
    // p = Dl_T(0) = (-4, 0), so v*(-p) = (4, 0) against u = 0
    assert!((el.max_xdot - 4.0).abs() < 1e-8);
    assert!(el.max_xdot > 0.1);
}

#[test]
fn boundary_arc_has_tangential_certificate() {
    let (disk, model, terminal) = hugging();
    let grid = TimeGrid::new(1.0, 200);
    let x0 = [1.0, 0.0];
    let eta = still(&x0, grid, &disk);
    let br = best_response(&x0, &eta, &WIDE, &model, &terminal, &disk, &BrOptions::default()).unwrap();
    let env = MeanFieldEnv::new(&eta, &model, &terminal);
    let el = euler_lagrange_residual(&br.state, &br.control, &env, &model, &terminal, &disk);
    let active = el.active.iter().filter(|a| **a).count();
    assert!(active > 150, "{active} active cells");
    assert!(el.max_pdot < 1e-3, "{}", el.max_pdot);
    let lam = el.lambda_hat.iter().zip(&el.active).filter(|(_, a)| **a).map(|(l, _)| l.abs()).fold(0.0, f64::max);
    assert!(lam > 1.0, "{lam}");
    assert!(el.lip_p.is_finite());
}

#[test]
fn interval_lattice_is_exhaustive() {
    let interval = Domain::preset("interval").unwrap();
    let model = QuadraticModel::quadratic(1, 1.0, &interval);
    let terminal = Terminal::target(1.0, vec![0.9], &interval);
    let grid = TimeGrid::new(1.0, 20);
    let x0 = [0.2];
    let eta = still(&x0, grid, &interval);
    let budget = KBudget::new(10.0, 1e3);
    let r = brute_force_best_response(&x0, &eta, &budget, &model, &terminal, &interval, 2, 9).unwrap();
    assert_eq!(r.candidates, 81.0);
    // enumerate the 81 sequences here
    let vmax = 1.0;
    let vs: Vec<f64> = (0..9).map(|i| -vmax + 2.0 * vmax * i as f64 / 8.0).collect();
    let mut best = f64::INFINITY;
    for &a in &vs {
        for &b in &vs {
            let u = ControlPath::from_fn(grid, 1, |t| {
                if (t - 0.5).abs() < 1e-12 {
                    vec![0.5 * (a + b)]
                } else if t < 0.5 {
                    vec![a]
                } else {
                    vec![b]
                }
            });
            let x = rollout(&x0, &u, &interval);
            if x.feasible {
                best = best.min(total_cost(&x0, &u, &eta, &model, &terminal, &interval).unwrap());
            }
        }
    }
    assert!(r.cost <= best + 1e-12, "{} vs {best}", r.cost);
    assert!(rollout(&x0, &r.control, &interval).feasible);
}

#[test]
fn oversized_lattice_is_refused() {
    let ball = Domain::unit_ball3d();
    let model = QuadraticModel::quadratic(3, 1.0, &ball);
    let grid = TimeGrid::new(1.0, 64);
    let eta = still(&[0.0; 3], grid, &ball);
    let r = brute_force_best_response(&[0.0; 3], &eta, &WIDE, &model, &Terminal::zero(), &ball, 8, 9);
    assert!(matches!(r, Err(TrajError::Combinatorics(n)) if n > 1e8));
}

#[test]
fn refinement_error_is_second_order() {
    let disk = Domain::unit_disk();
    let model = QuadraticModel::radial(2, 1.0, 1.0, &disk);
    let terminal = Terminal::target(1.0, vec![0.0, 0.4], &disk);
    let x0 = [0.3, 0.0];
    let cost = |n: usize| {
        let grid = TimeGrid::new(1.0, n);
        let eta = still(&x0, grid, &disk);
        best_response(&x0, &eta, &WIDE, &model, &terminal, &disk, &BrOptions::default()).unwrap().cost
    };
    let reference = cost(640);
    let e: Vec<f64> = [40, 80, 160].iter().map(|&n| (cost(n) - reference).abs()).collect();
    for pair in e.windows(2) {
        let ratio = pair[0] / pair[1];
        assert!((3.0..5.5).contains(&ratio), "{e:?}");
    }
}

fn small_eta(grid: TimeGrid, disk: &Domain, seeds: &[(f64, f64, f64, f64, f64)]) -> PathMeasure {
    let total: f64 = seeds.iter().map(|s| s.4).sum();
    let particles = seeds
        .iter()
        .map(|&(x, y, a, b, w)| {
            let u = ControlPath::from_fn(grid, 2, |t| vec![a * (1.0 - t), b * t]);
            particle(&[x, y], u, w / total, disk)
        })
        .collect();
    PathMeasure::new(grid, 2, particles)
}

fn seeds() -> impl Strategy<Value = Vec<(f64, f64, f64, f64, f64)>> {
    prop::collection::vec((-0.3f64..0.3, -0.3f64..0.3, -0.5f64..0.5, -0.5f64..0.5, 0.1f64..1.0), 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rollout_is_the_trapezoid_rule(
        x in -0.5f64..0.5, y in -0.5f64..0.5,
        a in -2.0f64..2.0, b in -2.0f64..2.0, c in -3.0f64..3.0,
    ) {
        let disk = Domain::unit_disk();
        let grid = TimeGrid::new(0.7, 35);
        let u = ControlPath::from_fn(grid, 2, |t| vec![a + c * t, b * (c * t).sin()]);
        let s = rollout(&[x, y], &u, &disk);
        let dt = grid.dt();
        for i in 0..35 {
            for k in 0..2 {
                let step = s.node(i)[k] + dt * 0.5 * (u.node(i)[k] + u.node(i + 1)[k]);
                prop_assert!((s.node(i + 1)[k] - step).abs() < 1e-14);
            }
        }
        let min_b = (0..=35).map(|i| disk.signed_distance(s.node(i))).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(s.feasible, min_b >= -1e-9);
    }

    #[test]
    fn projection_lands_in_the_budget(
        coeffs in prop::collection::vec(-20.0f64..20.0, 6),
        k1 in 0.1f64..5.0, k2 in 0.1f64..30.0,
    ) {
        let grid = TimeGrid::new(1.0, 40);
        let mut u = ControlPath::from_fn(grid, 2, |t| {
            vec![coeffs[0] + coeffs[1] * (7.0 * t).sin() + coeffs[2] * t, coeffs[3] * (11.0 * t).cos() + coeffs[4] + coeffs[5] * t * t]
        });
        let budget = KBudget::new(k1, k2);
        project_budget(&mut u, &budget);
        prop_assert!(u.within_budget(&budget, 0.0));
        let before = u.clone();
        project_budget(&mut u, &budget);
        prop_assert_eq!(before, u);
    }

    #[test]
    fn cost_is_measure_lipschitz(a in seeds(), b in seeds()) {
        let disk = Domain::unit_disk();
        let model = QuadraticModel::congestion(2, 0.05, 1.0, 1.0, &disk);
        let terminal = Terminal::zero();
        let grid = TimeGrid::new(1.0, 40);
        let (e1, e2) = (small_eta(grid, &disk, &a), small_eta(grid, &disk, &b));
        let u = ControlPath::from_fn(grid, 2, |t| vec![0.3 - t, 0.2]);
        let x0 = [0.1, -0.2];
        let c1 = total_cost(&x0, &u, &e1, &model, &terminal, &disk).unwrap();
        let c2 = total_cost(&x0, &u, &e2, &model, &terminal, &disk).unwrap();
        let sup_w1 = (0..=40)
            .map(|i| {
                let t = grid.time(i);
                wasserstein1(&push_forward_at_time(&e1, t), &push_forward_at_time(&e2, t), W1Backend::Flow).unwrap()
            })
            .fold(0.0, f64::max);
        let lip = model.constants().c1 * (1.0 + 1.0);
        prop_assert!((c1 - c2).abs() <= lip * sup_w1 + 1e-12);
    }
}
