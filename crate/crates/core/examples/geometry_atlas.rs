//! Builds boundary atlases for the preset domains and prints their constants.

use mfgc::geometry::{build_atlas, chart_forward, Domain};
use std::time::Instant;

fn main() {
    for (name, r_hat) in [("disk", 0.2), ("interval", 0.1), ("ball3d", 0.2), ("rounded-box", 0.1)] {
        let domain = Domain::preset(name).expect("preset");
        let t0 = Instant::now();
        let atlas = build_atlas(&domain, r_hat).expect("atlas");
        println!(
            "{name:12} charts={:4} C={:10.3} r={:.3} r_hat={:.3} ({:.2?})",
            atlas.charts.len(),
            atlas.c_bound,
            atlas.r,
            atlas.r_hat,
            t0.elapsed()
        );
    }
    let disk = Domain::unit_disk();
    let atlas = build_atlas(&disk, 0.2).expect("atlas");
    let chart = &atlas.charts[atlas.nearest_chart(&[1.0, 0.0])];
    println!("psi(0.9, 0) = {:?}", chart_forward(chart, &[0.9, 0.0]).expect("in chart"));
}
