//! Constrained best responses: the disk target chase against the lattice
//! oracle, and a boundary-hugging arc with its costate certificate.

use std::time::Instant;

use mfgc::constants::KBudget;
use mfgc::geometry::Domain;
use mfgc::lagrangian::{QuadraticModel, Terminal};
use mfgc::measures::{Particle, PathMeasure};
use mfgc::trajopt::*;

fn still(x0: &[f64], grid: TimeGrid, domain: &Domain) -> PathMeasure {
    let control = ControlPath::zeros(grid, x0.len());
    let state = rollout(x0, &control, domain);
    PathMeasure::new(grid, x0.len(), vec![Particle { state, control, weight: 1.0 }])
}

fn main() {
    let disk = Domain::unit_disk();
    let grid = TimeGrid::new(1.0, 200);
    let budget = KBudget::new(8.0, 2000.0);
    let model = QuadraticModel::quadratic(2, 1.0, &disk);
    let terminal = Terminal::target(1.0, vec![2.0, 0.0], &disk);
    let x0 = [0.0, 0.0];
    let eta = still(&x0, grid, &disk);

    let clock = Instant::now();
    let br = best_response(&x0, &eta, &budget, &model, &terminal, &disk, &BrOptions::default()).expect("solve");
    println!(
        "target chase: cost {:.6}, endpoint {:?}, stationarity {:.2e}, iters {}, repair {:.2e} ({:.2?})",
        br.cost,
        br.state.endpoint(),
        br.stationarity,
        br.iterations,
        br.repair,
        clock.elapsed()
    );
    let clock = Instant::now();
    let oracle = brute_force_best_response(&x0, &eta, &budget, &model, &terminal, &disk, 8, 9).expect("oracle");
    println!(
        "lattice oracle: cost {:.6}, {:.3e} sequences via {:.3e} transitions ({:.2?})",
        oracle.cost,
        oracle.candidates,
        oracle.evaluations,
        clock.elapsed()
    );
    let env = MeanFieldEnv::new(&eta, &model, &terminal);
    let el = euler_lagrange_residual(&br.state, &br.control, &env, &model, &terminal, &disk);
    println!(
        "  EL: xdot {:.2e}, pdot {:.2e}, terminal {:.2e}, beta {:.4}, Lip(p) {:.3}",
        el.max_xdot, el.max_pdot, el.terminal, el.beta_hat, el.lip_p
    );

    // radial pull outward keeps the path on the circle
    let radial = QuadraticModel::radial(2, 4.0, 1.0, &disk);
    let a = 1.5 * std::f64::consts::FRAC_1_SQRT_2;
    let target = Terminal::target(0.5, vec![a, a], &disk);
    let x0 = [1.0, 0.0];
    let eta = still(&x0, grid, &disk);
    let br = best_response(&x0, &eta, &budget, &radial, &target, &disk, &BrOptions::default()).expect("solve");
    let env = MeanFieldEnv::new(&eta, &radial, &target);
    let el = euler_lagrange_residual(&br.state, &br.control, &env, &radial, &target, &disk);
    let active = el.active.iter().filter(|a| **a).count();
    let lam = el.lambda_hat.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    println!(
        "boundary arc: cost {:.6}, active cells {active}/{}, max|Lambda| {lam:.3}, tangential pdot {:.2e}, xdot {:.2e}",
        br.cost,
        el.active.len(),
        el.max_pdot,
        el.max_xdot
    );
}
