use approx::assert_abs_diff_eq;
use mfgc::geometry::*;
use proptest::prelude::*;
use std::sync::OnceLock;

fn disk_atlas() -> &'static Atlas {
    static A: OnceLock<Atlas> = OnceLock::new();
    A.get_or_init(|| build_atlas(&Domain::unit_disk(), 0.2).unwrap())
}

fn ball_atlas() -> &'static Atlas {
    static A: OnceLock<Atlas> = OnceLock::new();
    A.get_or_init(|| build_atlas(&Domain::unit_ball3d(), 0.2).unwrap())
}

#[test]
fn disk_signed_distance_examples() {
    let d = Domain::unit_disk();
    assert_abs_diff_eq!(signed_distance(&d, &[0.0, 0.0]), 1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(signed_distance(&d, &[1.0, 0.0]), 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(signed_distance(&d, &[2.0, 0.0]), -1.0, epsilon = 1e-15);
}

#[test]
fn disk_projection_examples() {
    let d = Domain::unit_disk();
    let p = boundary_projection(&d, &[0.5, 0.0]).unwrap();
    assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-14);
    assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-14);
    let p = boundary_projection(&d, &[0.0, -0.9]).unwrap();
    assert_abs_diff_eq!(p[1], -1.0, epsilon = 1e-14);
    assert!(matches!(
        boundary_projection(&d, &[0.0, 0.0]),
        Err(GeometryError::OutsideCollar { .. })
    ));
}

#[test]
fn disk_normal_examples() {
    let d = Domain::unit_disk();
    let n = inward_normal(&d, &[1.0, 0.0]).unwrap();
    assert_abs_diff_eq!(n[0], -1.0, epsilon = 1e-15);
    let n = inward_normal(&d, &[0.0, 1.0]).unwrap();
    assert_abs_diff_eq!(n[1], -1.0, epsilon = 1e-15);
    assert!(matches!(inward_normal(&d, &[0.5, 0.0]), Err(GeometryError::NotOnBoundary(_))));
}

#[test]
fn disk_atlas_covers_boundary() {
    let d = Domain::unit_disk();
    let atlas = build_atlas(&d, 0.2).unwrap();
    assert!(atlas.charts.len() >= 16);
    let samples = d.boundary_samples(10_000, 1);
    assert!(atlas.covering_ratio(&samples) <= 1.0);
    for c in &atlas.charts {
        let y = chart_forward(c, &c.center).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12));
        assert!(c.c_bound >= 1.0);
    }
}

#[test]
fn disk_chart_closed_form() {
    let d = Domain::unit_disk();
    let atlas = build_atlas(&d, 0.2).unwrap();
    let c = &atlas.charts[atlas.nearest_chart(&[1.0, 0.0])];
    assert_abs_diff_eq!(c.center[0], 1.0, epsilon = 1e-15);
    let y = chart_forward(c, &[0.9, 0.0]).unwrap();
    assert_abs_diff_eq!(y[0], 0.0, epsilon = 1e-15);
    assert_abs_diff_eq!(y[1], 0.1, epsilon = 1e-15);
    let x = chart_inverse(c, &[0.0, 0.1]).unwrap();
    assert_abs_diff_eq!(x[0], 0.9, epsilon = 1e-15);
    assert_abs_diff_eq!(x[1], 0.0, epsilon = 1e-15);
    assert_eq!(chart_forward(c, &[0.0, 0.0]), Err(GeometryError::OutOfChart));
}

#[test]
fn r_hat_above_collar_quarter_fails() {
    let d = Domain::unit_disk();
    assert!(matches!(build_atlas(&d, 0.3), Err(GeometryError::ChartFailure { .. })));
}

#[test]
fn audits_pass_on_presets() {
    for (name, rh) in [("disk", 0.2), ("interval", 0.1), ("ball3d", 0.2), ("rounded-box", 0.1)] {
        let d = Domain::preset(name).unwrap();
        let atlas = build_atlas(&d, rh).unwrap();
        for row in audit::run(&d, &atlas, 1000, 3) {
            assert!(row.pass, "{name}: {row:?}");
        }
    }
}

#[test]
fn inflated_collar_fails_projection_audit() {
    let mut d = Domain::unit_disk();
    let atlas = build_atlas(&d, 0.2).unwrap();
    d.collar_width = 1.2;
    let rows = audit::run(&d, &atlas, 500, 3);
    assert!(rows.iter().any(|r| r.check == "projection_normal_segments" && !r.pass));
}

fn collar_point() -> impl Strategy<Value = (f64, f64)> {
    (0.0..std::f64::consts::TAU, -0.4..0.4f64)
}

proptest! {
    #[test]
    fn chart_roundtrip_in_collar((ang, depth) in collar_point()) {
        let d = Domain::unit_disk();
        let atlas = disk_atlas();
        let x = [(1.0 - depth) * ang.cos(), (1.0 - depth) * ang.sin()];
        let c = &atlas.charts[atlas.nearest_chart(&x)];
        let y = chart_forward(c, &x).unwrap();
        prop_assert!((y[1] - signed_distance(&d, &x)).abs() < 1e-8);
        let z = chart_inverse(c, &y).unwrap();
        prop_assert!(((z[0] - x[0]).powi(2) + (z[1] - x[1]).powi(2)).sqrt() < 1e-8);
    }

    #[test]
    fn projection_is_idempotent(x in -1.5..1.5f64, y in -1.5..1.5f64) {
        let d = Domain::unit_disk();
        if let Ok(p) = boundary_projection(&d, &[x, y]) {
            let q = boundary_projection(&d, &p).unwrap();
            prop_assert!(((p[0]-q[0]).powi(2) + (p[1]-q[1]).powi(2)).sqrt() < 1e-10);
        }
    }

    #[test]
    fn ball3d_roundtrip(a in -1.0..1.0f64, b in -1.0..1.0f64, c in -1.0..1.0f64, depth in -0.5..0.5f64) {
        let atlas = ball_atlas();
        let n = (a*a + b*b + c*c).sqrt();
        prop_assume!(n > 0.1);
        let x = [(1.0 - depth) * a / n, (1.0 - depth) * b / n, (1.0 - depth) * c / n];
        let ch = &atlas.charts[atlas.nearest_chart(&x)];
        let y = chart_forward(ch, &x).unwrap();
        let z = chart_inverse(ch, &y).unwrap();
        let err: f64 = z.iter().zip(&x).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        prop_assert!(err < 1e-8);
    }
}
