//! Exact W1 by network simplex on atomic measures, and the coupling bound on
//! path measures.

use mfgc::constants::KBudget;
use mfgc::geometry::Domain;
use mfgc::measures::*;
use mfgc::trajopt::{rollout, ControlPath, TimeGrid};

fn particle(domain: &Domain, grid: TimeGrid, x0: Vec<f64>, v: Vec<f64>, weight: f64) -> Particle {
    let control = ControlPath::constant(grid, &v);
    Particle { state: rollout(&x0, &control, domain), control, weight }
}

fn main() {
    let m = JointMeasure::dirac(vec![0.3, 0.1], vec![1.0, 0.0]);
    println!("W1(m, m) = {}", wasserstein1(&m, &m, W1Backend::Flow).unwrap());
    let a = JointMeasure::dirac(vec![0.0, 0.0], vec![0.0, 0.0]);
    let b = JointMeasure::dirac(vec![1.0, 0.0], vec![1.0, 0.0]);
    println!("W1(d(0,0), d(e1,e1)) = {}", wasserstein1(&a, &b, W1Backend::Flow).unwrap());
    let a = StateMeasure { atoms: vec![StateAtom { x: vec![0.0], weight: 0.5 }, StateAtom { x: vec![1.0], weight: 0.5 }] };
    let b = StateMeasure::dirac(vec![0.5]);
    println!("W1((d0 + d1)/2, d(1/2)) = {}", wasserstein1(&a, &b, W1Backend::Flow).unwrap());

    let n = 200;
    let a = StateMeasure::uniform((0..n).map(|i| vec![(i as f64 / n as f64).sin(), (i as f64).cos() * 0.3]).collect());
    let b = StateMeasure::uniform((0..n).map(|i| vec![(i as f64 * 0.7).cos() * 0.5, 0.1]).collect());
    let exact = wasserstein1(&a, &b, W1Backend::Flow).unwrap();
    let greedy = wasserstein1(&a, &b, W1Backend::Greedy).unwrap();
    println!("{n} x {n} atoms: exact {exact:.9}, greedy upper bound {greedy:.9}");

    let disk = Domain::unit_disk();
    let grid = TimeGrid::new(1.0, 50);
    let eta = PathMeasure::new(
        grid,
        2,
        vec![
            particle(&disk, grid, vec![0.0, 0.0], vec![0.4, 0.0], 0.5),
            particle(&disk, grid, vec![-0.3, 0.2], vec![0.0, -0.5], 0.3),
            particle(&disk, grid, vec![0.1, -0.6], vec![0.2, 0.6], 0.2),
        ],
    );
    for t in [0.0, 0.5, 1.0] {
        let nu = push_forward_at_time(&eta, t);
        let mu = state_marginal(&nu);
        println!("t = {t}: state atoms {:?}", mu.atoms.iter().map(|a| (a.x.clone(), a.weight)).collect::<Vec<_>>());
    }
    let report = flow_lipschitz_check(&eta, &KBudget::new(1.0, 1.0), 100, 0);
    println!("flow Lipschitz: worst ratio {:.4} against K1 + K2 = 2, pass {}", report.worst_ratio, report.pass);
}
