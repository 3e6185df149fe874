//! Evaluates the derived-constant chain and solves for the regularity budget.

use mfgc::constants::{chain_input, evaluate_chain, solve_budget_from_input};
use mfgc::geometry::Domain;
use mfgc::lagrangian::{LagrangianConstants, QuadraticModel, Terminal};

fn main() {
    let disk = Domain::unit_disk();
    let mut model = QuadraticModel::quadratic(2, 1.0, &disk);
    model.declared = LagrangianConstants { n1: 1.0, c: 2.0, k1: 1.0, c1: 0.01, kappa1: 1.0 };
    let terminal = Terminal::sine();
    let input = chain_input(&model, &terminal, &disk, None, 0);
    println!("frozen scenario, Lip(nu) = 0");
    for (name, value, formula) in evaluate_chain(&input, 0.0, 0.0).ledger() {
        println!("  {name:14} {value:>16.6}   {formula}");
    }
    match solve_budget_from_input(&input) {
        Ok((k, fit)) => {
            println!("  fit {fit:?}");
            println!("  rate b6 c1 + c2 = {:.6}", fit.b6 * 0.01 + input.hamiltonian.c2);
            println!("  budget K1 = {}, K2 = {:.3}", k.k1, k.k2);
        }
        Err(e) => println!("  {e}"),
    }

    let interval = Domain::preset("interval").expect("preset");
    let congestion = QuadraticModel::congestion(1, 0.01, 1.0, 1.0, &interval);
    for w in [1.0, 0.25, 0.08] {
        let t = Terminal::target(w, vec![1.3], &interval);
        let input = chain_input(&congestion, &t, &interval, None, 0);
        match solve_budget_from_input(&input) {
            Ok((k, fit)) => println!("interval congestion w={w}: K = ({}, {:.3}), b6 = {:.3}", k.k1, k.k2, fit.b6),
            Err(e) => println!("interval congestion w={w}: {e}"),
        }
    }
}
