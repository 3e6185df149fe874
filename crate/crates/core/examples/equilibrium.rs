//! Damped fixed-point search on the interval congestion game and on a
//! decoupled disk game, followed by mild-solution verification.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mfgc::constants::{solve_k_budget, KBudget};
use mfgc::equilibrium::*;
use mfgc::geometry::Domain;
use mfgc::lagrangian::{QuadraticModel, Terminal};
use mfgc::measures::{StateAtom, StateMeasure};
use mfgc::trajopt::BrOptions;

fn uniform_atoms(n: usize, seed: u64) -> StateMeasure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    StateMeasure {
        atoms: (0..n).map(|_| StateAtom { x: vec![rng.gen_range(0.0..1.0)], weight: 1.0 / n as f64 }).collect(),
    }
}

fn show(name: &str, sol: &MildSolution, game: &Game) {
    let r = &sol.report;
    println!(
        "{name}: converged {} after {} steps, exploitability {:.3e}, particles {}, pruned {:.1e}",
        r.converged,
        r.iterations,
        r.exploitability,
        sol.eta.particles.len(),
        r.pruned_mass
    );
    for h in &r.history {
        println!(
            "  k={:3} exploitability {:.3e} residual {:.3e}{} alpha {:.3} particles {}",
            h.iteration,
            h.exploitability,
            h.fixed_point_residual,
            if h.residual_exact { "" } else { " (bound)" },
            h.alpha,
            h.particles
        );
    }
    println!(
        "  budget audit {} (sup {:.3}, lip {:.3}), flow ratio {:.3}, mass error {:.1e}",
        r.budget.pass, r.budget.max_sup, r.budget.max_lipschitz, r.flow.worst_ratio, r.mass_error
    );
    let check = verify_mild_solution(sol, game);
    for item in &check.items {
        println!("  {} {}: worst {:.2e} ({})", if item.pass { "pass" } else { "FAIL" }, item.item, item.worst, item.detail);
    }
    let v = &sol.value;
    for (ti, t) in v.times.iter().enumerate() {
        let row: Vec<String> = (0..v.points.len()).step_by(2).map(|pi| format!("{:.4}", v.get(ti, pi))).collect();
        println!("  V(t={t:.2}, .) = {}", row.join(" "));
    }
}

fn main() {
    let br = BrOptions::default();

    let interval = Domain::preset("interval").expect("preset");
    let model = QuadraticModel::congestion(1, 0.01, 1.0, 1.0, &interval);
    let terminal = Terminal::target(0.08, vec![1.3], &interval);
    let (budget, _, _) = solve_k_budget(&model, &terminal, &interval).expect("budget");
    let game = Game { domain: &interval, model: &model, terminal: &terminal, budget, br: &br };
    let config = EquilibriumConfig { seed: 7, ..EquilibriumConfig::default() };
    let clock = Instant::now();
    match damped_fixed_point_solve(&config, &uniform_atoms(50, 7), &game) {
        Ok(sol) => show("interval congestion", &sol, &game),
        Err(EquilibriumError::NotConverged(sol)) => show("interval congestion (not converged)", &sol, &game),
        Err(e) => println!("interval congestion: {e}"),
    }
    println!("  ({:.2?})", clock.elapsed());

    let disk = Domain::unit_disk();
    let model = QuadraticModel::quadratic(2, 1.0, &disk);
    let terminal = Terminal::target(1.0, vec![2.0, 0.0], &disk);
    let game = Game { domain: &disk, model: &model, terminal: &terminal, budget: KBudget::new(8.0, 2000.0), br: &br };
    let m0 = StateMeasure {
        atoms: vec![
            StateAtom { x: vec![0.0, 0.0], weight: 0.5 },
            StateAtom { x: vec![-0.5, 0.5], weight: 0.3 },
            StateAtom { x: vec![0.2, -0.7], weight: 0.2 },
        ],
    };
    let config = EquilibriumConfig {
        particles_per_atom: 3,
        steps: 100,
        value_grid: ValueGridSpec { time_samples: 3, points_per_axis: 5 },
        ..EquilibriumConfig::default()
    };
    let clock = Instant::now();
    match damped_fixed_point_solve(&config, &m0, &game) {
        Ok(sol) => show("decoupled disk", &sol, &game),
        Err(e) => println!("decoupled disk: {e}"),
    }
    println!("  ({:.2?})", clock.elapsed());
}
