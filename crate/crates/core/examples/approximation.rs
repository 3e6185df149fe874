//! Perturbed-start approximation of a control that runs along the boundary.
//!
//! The reference path on the unit disk spirals out to the circle, follows it
//! on `[0.3, 0.7]` and spirals back in. Starting points are pushed inward by
//! shrinking amounts and the four-case construction is audited each time.

use mfgc::approx::{approximate_with, check_approx_constants, ApproxOptions};
use mfgc::constants::KBudget;
use mfgc::geometry::{build_atlas, Domain};
use mfgc::trajopt::{ControlPath, TimeGrid};

fn radius(t: f64) -> (f64, f64) {
    if t < 0.3 {
        (1.0 - 2.0 * (0.3 - t).powi(2), 4.0 * (0.3 - t))
    } else if t > 0.7 {
        (1.0 - 2.0 * (t - 0.7).powi(2), -4.0 * (t - 0.7))
    } else {
        (1.0, 0.0)
    }
}

fn dive(t: f64) -> (f64, f64) {
    let s = ((t - 0.5).abs() - 0.1).max(0.0);
    (1.0 - 4.0 * s * s, -8.0 * s * (t - 0.5).signum())
}

fn main() {
    let domain = Domain::unit_disk();
    let atlas = build_atlas(&domain, 0.2).expect("disk atlas");
    let grid = TimeGrid::new(1.0, 200);
    for (name, profile, budget) in [
        ("boundary arc", radius as fn(f64) -> (f64, f64), KBudget::new(2.0, 8.0)),
        ("dive from the interior", dive, KBudget::new(4.0, 12.0)),
    ] {
        println!("== {name}");
        run(&domain, &atlas, grid, profile, budget);
    }
}

fn run(domain: &Domain, atlas: &mfgc::geometry::Atlas, grid: TimeGrid, profile: fn(f64) -> (f64, f64), budget: KBudget) {
    let mut u0 = ControlPath::zeros(grid, 2);
    for i in 0..grid.nodes() {
        let t = grid.time(i);
        let (r, dr) = profile(t);
        u0.node_mut(i).copy_from_slice(&[dr * t.cos() - r * t.sin(), dr * t.sin() + r * t.cos()]);
    }
    let x0 = [profile(0.0).0, 0.0];
    let c = check_approx_constants(atlas, &budget, 1.0);
    println!(
        "C = {:.4}  K0 = {}  r_hat = {}  M = {:.4e}  L = {}  log10 eps_max = {:.2}",
        c.c, c.k0, c.r_hat, c.m, c.l, c.log10_eps_max
    );
    let normal = [-1.0, 0.0];
    for eps in [1e-4, 1e-5, 1e-6, 1e-7] {
        let xk = [x0[0] + eps * normal[0], x0[1] + eps * normal[1]];
        let a = approximate_with(domain, atlas, &u0, &x0, &xk, &budget, ApproxOptions { best_effort: true })
            .expect("construction runs");
        let cases: String = a.segments.iter().map(|s| char::from(b'0' + s.case)).collect();
        println!(
            "eps {eps:.0e}: cases {cases}  sup gap {:.3e}  gap/eps {:.3}  min b {:.2e}  budget+1 {}  failures {}",
            a.sup_gap,
            a.sup_gap / eps,
            a.state.min_distance,
            a.within_inflated_budget,
            a.failures.len()
        );
        if eps == 1e-6 {
            for s in a.segments.iter().filter(|s| s.case != 1) {
                println!(
                    "    l={:2} case {} lambda 2^-{:2} pos {:.2e} vel {:.2e} dist {:.2e} (d = {:.3})",
                    s.ell, s.case, s.halvings + 2, s.position_gap, s.velocity_gap, s.distance_gap, s.reference_distance
                );
            }
        }
    }
}
