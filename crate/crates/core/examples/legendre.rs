//! Hamiltonians of the preset running costs by numerical Legendre transform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mfgc::geometry::Domain;
use mfgc::lagrangian::{hamiltonian_view, legendre_transform, random_point_in, Lagrangian, QuadraticModel};
use mfgc::vecops::dot;

fn main() {
    let disk = Domain::unit_disk();
    let models = [
        QuadraticModel::quadratic(2, 1.0, &disk),
        QuadraticModel::shifted(vec![0.5, -0.25], 1.0, &disk),
        QuadraticModel::diagonal(vec![1.0, 2.0], 1.0, &disk),
        QuadraticModel::radial(2, 0.5, 1.0, &disk),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for m in &models {
        let (mut worst_eq, mut worst_ineq) = (0.0f64, f64::NEG_INFINITY);
        for _ in 0..200 {
            let t = rng.gen_range(0.0..1.0);
            let x = random_point_in(&mut rng, &disk);
            let p = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let (h, v) = legendre_transform(m, t, &x, &p, &Vec::new()).expect("legendre");
            worst_eq = worst_eq.max((h - dot(&p, &v) + m.value(t, &x, &v, &Vec::new())).abs());
            let w = [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)];
            worst_ineq = worst_ineq.max(dot(&p, &w) - m.value(t, &x, &w, &Vec::new()) - h);
        }
        let view = hamiltonian_view(m, &disk, 200, 1);
        println!(
            "{:20} equality gap {worst_eq:.1e}, max p.v - l - h {worst_ineq:.2}, n2 {:.3} k2 {:.3} kappa2 {:.3}",
            m.name(),
            view.n2,
            view.k2,
            view.kappa2
        );
    }

    // diag(1, 2): h(p) = p1^2 / 2 + p2^2 / 4, maximizer (p1, p2 / 2)
    let m = QuadraticModel::diagonal(vec![1.0, 2.0], 1.0, &disk);
    let p = [1.5, -2.0];
    let (h, v) = legendre_transform(&m, 0.0, &[0.0, 0.0], &p, &Vec::new()).expect("legendre");
    println!("diag(1,2) at p = {p:?}: h = {h:.12} (closed form {:.12}), v = {v:.6?}", 0.5 * (p[0] * p[0] + 0.5 * p[1] * p[1]));
}
