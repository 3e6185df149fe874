//! Constraint regions, boundary distance, projection and boundary charts.
//!
//! A [`Domain`] carries an analytic signed distance `b` (positive inside) and
//! a collar width on which `b` is smooth and the nearest-point projection is
//! unique. [`build_atlas`] covers the boundary with charts whose last
//! coordinate is the signed distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numdiff;
use crate::vecops::{axpy, dist, dot, norm, normalize, sub};

/// Boundary points with `b` in `[-SNAP_TOL, 0)` count as on the boundary.
pub const SNAP_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point at |b| = {distance} lies outside the collar of width {collar_width}")]
    OutsideCollar { distance: f64, collar_width: f64 },
    #[error("point is not on the boundary (b = {0:e})")]
    NotOnBoundary(f64),
    #[error("chart construction failed at r_hat = {r_hat}: {reason}")]
    ChartFailure { r_hat: f64, reason: String },
    #[error("point outside the certified chart domain")]
    OutOfChart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Ball { center: Vec<f64>, radius: f64 },
    Interval { lo: f64, hi: f64 },
    /// Axis-aligned box `[lo, hi]` whose corners are rounded with radius `rounding`.
    RoundedBox { lo: Vec<f64>, hi: Vec<f64>, rounding: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    pub shape: Shape,
    /// Band `|b| < collar_width` on which `b` is C^2 and projection is unique.
    pub collar_width: f64,
}

impl Domain {
    pub fn ball(center: Vec<f64>, radius: f64) -> Self {
        let name = if center.len() == 2 { "disk" } else { "ball" };
        Domain {
            name: name.into(),
            collar_width: 0.9 * radius,
            shape: Shape::Ball { center, radius },
        }
    }

    pub fn unit_disk() -> Self {
        Self::ball(vec![0.0, 0.0], 1.0)
    }

    pub fn unit_ball3d() -> Self {
        let mut d = Self::ball(vec![0.0; 3], 1.0);
        d.name = "ball3d".into();
        d
    }

    pub fn interval(lo: f64, hi: f64) -> Self {
        assert!(hi > lo, "empty interval");
        Domain {
            name: "interval".into(),
            collar_width: 0.45 * (hi - lo),
            shape: Shape::Interval { lo, hi },
        }
    }

    pub fn rounded_box(lo: Vec<f64>, hi: Vec<f64>, rounding: f64) -> Self {
        let min_half = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| 0.5 * (b - a))
            .fold(f64::INFINITY, f64::min);
        assert!(rounding > 0.0 && rounding <= min_half, "rounding radius out of range");
        Domain {
            name: "rounded-box".into(),
            collar_width: 0.9 * rounding,
            shape: Shape::RoundedBox { lo, hi, rounding },
        }
    }

    /// Looks up a preset by name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "disk" => Some(Self::unit_disk()),
            "ball3d" => Some(Self::unit_ball3d()),
            "interval" => Some(Self::interval(0.0, 1.0)),
            "rounded-box" => Some(Self::rounded_box(vec![-1.0, -1.0], vec![1.0, 1.0], 0.5)),
            _ => None,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.shape {
            Shape::Ball { center, .. } => center.len(),
            Shape::Interval { .. } => 1,
            Shape::RoundedBox { lo, .. } => lo.len(),
        }
    }

    pub fn diameter(&self) -> f64 {
        match &self.shape {
            Shape::Ball { radius, .. } => 2.0 * radius,
            Shape::Interval { lo, hi } => hi - lo,
            Shape::RoundedBox { lo, hi, rounding } => {
                let inner: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| b - a - 2.0 * rounding).collect();
                norm(&inner) + 2.0 * rounding
            }
        }
    }

    pub fn centre(&self) -> Vec<f64> {
        match &self.shape {
            Shape::Ball { center, .. } => center.clone(),
            Shape::Interval { lo, hi } => vec![0.5 * (lo + hi)],
            Shape::RoundedBox { lo, hi, .. } => lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect(),
        }
    }

    /// Sup of the principal curvatures of the boundary.
    pub fn curvature_bound(&self) -> f64 {
        match &self.shape {
            Shape::Ball { radius, .. } => 1.0 / radius,
            Shape::Interval { .. } => 0.0,
            Shape::RoundedBox { rounding, .. } => 1.0 / rounding,
        }
    }

    /// Tight axis-aligned box around the closed domain.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match &self.shape {
            Shape::Ball { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
            Shape::Interval { lo, hi } => (vec![*lo], vec![*hi]),
            Shape::RoundedBox { lo, hi, .. } => (lo.clone(), hi.clone()),
        }
    }

    /// The working box X: the bounding box of the closure inflated by 10% of the diameter.
    pub fn working_box(&self) -> (Vec<f64>, Vec<f64>) {
        let pad = 0.1 * self.diameter();
        let (lo, hi) = self.bounding_box();
        (
            lo.iter().map(|v| v - pad).collect(),
            hi.iter().map(|v| v + pad).collect(),
        )
    }

    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        match &self.shape {
            Shape::Ball { center, radius } => radius - dist(x, center),
            Shape::Interval { lo, hi } => (x[0] - lo).min(hi - x[0]),
            Shape::RoundedBox { lo, hi, rounding } => {
                let mut outside = 0.0;
                let mut inside = f64::NEG_INFINITY;
                for i in 0..x.len() {
                    let c = 0.5 * (lo[i] + hi[i]);
                    let half = 0.5 * (hi[i] - lo[i]) - rounding;
                    let q = (x[i] - c).abs() - half;
                    outside += q.max(0.0).powi(2);
                    inside = inside.max(q);
                }
                rounding - (outside.sqrt() + inside.min(0.0))
            }
        }
    }

    /// Gradient of the signed distance, equal to the inward normal of the
    /// nearest boundary point inside the collar. Zero on the cut locus of a ball.
    pub fn distance_gradient(&self, x: &[f64]) -> Vec<f64> {
        match &self.shape {
            Shape::Ball { center, .. } => {
                let r = sub(center, x);
                let n = norm(&r);
                if n == 0.0 {
                    vec![0.0; x.len()]
                } else {
                    r.iter().map(|v| v / n).collect()
                }
            }
            Shape::Interval { lo, hi } => {
                if x[0] - lo <= hi - x[0] {
                    vec![1.0]
                } else {
                    vec![-1.0]
                }
            }
            Shape::RoundedBox { lo, hi, rounding } => {
                let d = x.len();
                let mut q = vec![0.0; d];
                let mut sgn = vec![0.0; d];
                for i in 0..d {
                    let c = 0.5 * (lo[i] + hi[i]);
                    let half = 0.5 * (hi[i] - lo[i]) - rounding;
                    q[i] = (x[i] - c).abs() - half;
                    sgn[i] = if x[i] >= c { 1.0 } else { -1.0 };
                }
                let pos: Vec<f64> = q.iter().map(|v| v.max(0.0)).collect();
                let pn = norm(&pos);
                if pn > 0.0 {
                    (0..d).map(|i| -sgn[i] * pos[i] / pn).collect()
                } else {
                    let k = (0..d)
                        .max_by(|&a, &b| q[a].total_cmp(&q[b]))
                        .unwrap_or(0);
                    (0..d).map(|i| if i == k { -sgn[i] } else { 0.0 }).collect()
                }
            }
        }
    }

    /// True when `b(x) >= -tol`.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.signed_distance(x) >= -tol
    }

    /// Boundary point hit by the ray from the domain centre in direction `dir`.
    /// All presets are convex, so the crossing is unique.
    pub fn boundary_point_along(&self, dir: &[f64]) -> Vec<f64> {
        let c = self.centre();
        let u = normalize(dir);
        let mut lo = 0.0;
        let mut hi = self.diameter();
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.signed_distance(&axpy(&c, mid, &u)) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-16 {
                break;
            }
        }
        let p = axpy(&c, 0.5 * (lo + hi), &u);
        // land exactly on the boundary up to rounding
        let b = self.signed_distance(&p);
        axpy(&p, -b, &self.distance_gradient(&p))
    }

    /// Deterministic boundary samples.
    pub fn boundary_samples(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let d = self.dim();
        match d {
            1 => {
                let Shape::Interval { lo, hi } = self.shape else { unreachable!() };
                (0..n).map(|i| vec![if i % 2 == 0 { lo } else { hi }]).collect()
            }
            2 => (0..n)
                .map(|i| {
                    let a = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
                    self.boundary_point_along(&[a.cos(), a.sin()])
                })
                .collect(),
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n)
                    .map(|_| {
                        let dir = random_unit(&mut rng, d);
                        self.boundary_point_along(&dir)
                    })
                    .collect()
            }
        }
    }
}

pub(crate) fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = norm(&v);
        if n > 1e-3 && n <= 1.0 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

pub fn signed_distance(domain: &Domain, x: &[f64]) -> f64 {
    domain.signed_distance(x)
}

/// Nearest boundary point, unique inside the collar.
pub fn boundary_projection(domain: &Domain, x: &[f64]) -> Result<Vec<f64>, GeometryError> {
    let b = domain.signed_distance(x);
    if b.abs() >= domain.collar_width {
        return Err(GeometryError::OutsideCollar {
            distance: b.abs(),
            collar_width: domain.collar_width,
        });
    }
    Ok(axpy(x, -b, &domain.distance_gradient(x)))
}

pub fn inward_normal(domain: &Domain, xi: &[f64]) -> Result<Vec<f64>, GeometryError> {
    let b = domain.signed_distance(xi);
    if b.abs() >= 1e-8 {
        return Err(GeometryError::NotOnBoundary(b));
    }
    Ok(normalize(&domain.distance_gradient(xi)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ChartKind {
    /// Arc-length tangential coordinate on a circle.
    Arc { center: [f64; 2], radius: f64, theta0: f64 },
    /// Orthonormal tangent frame at the centre; the boundary is a graph over it.
    Frame { tangents: Vec<Vec<f64>>, normal: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chart {
    pub center: Vec<f64>,
    pub r_hat: f64,
    pub r: f64,
    /// Bound on first and second derivatives of the chart and its inverse.
    pub c_bound: f64,
    pub kind: ChartKind,
    pub domain: Domain,
}

impl Chart {
    fn new(domain: &Domain, xi: Vec<f64>, r_hat: f64) -> Result<Self, GeometryError> {
        let n = inward_normal(domain, &xi)?;
        let kind = if domain.dim() == 2 {
            if let Shape::Ball { center, radius } = &domain.shape {
                ChartKind::Arc {
                    center: [center[0], center[1]],
                    radius: *radius,
                    theta0: (xi[1] - center[1]).atan2(xi[0] - center[0]),
                }
            } else {
                ChartKind::Frame { tangents: tangent_frame(&n), normal: n }
            }
        } else {
            ChartKind::Frame { tangents: tangent_frame(&n), normal: n }
        };
        Ok(Chart {
            center: xi,
            r_hat,
            r: 4.0 * r_hat,
            c_bound: 1.0,
            kind,
            domain: domain.clone(),
        })
    }

    /// Radius of the ball around the centre on which the chart is certified.
    pub fn domain_radius(&self) -> f64 {
        4.0 * self.r_hat
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        dist(x, &self.center) <= self.domain_radius() * (1.0 + 1e-12)
            && self.domain.signed_distance(x).abs() < self.domain.collar_width
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, GeometryError> {
        if !self.contains(x) {
            return Err(GeometryError::OutOfChart);
        }
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let b = self.domain.signed_distance(x);
        let p = axpy(x, -b, &self.domain.distance_gradient(x));
        let mut y = match &self.kind {
            ChartKind::Arc { center, radius, theta0 } => {
                let ang = (p[1] - center[1]).atan2(p[0] - center[0]) - theta0;
                vec![radius * wrap_angle(ang)]
            }
            ChartKind::Frame { tangents, .. } => {
                let rel = sub(&p, &self.center);
                tangents.iter().map(|e| dot(e, &rel)).collect()
            }
        };
        y.push(b);
        y
    }

    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>, GeometryError> {
        let d = self.domain.dim();
        if y.len() != d || norm(y) > 2.0 * self.r || y[d - 1].abs() >= self.domain.collar_width {
            return Err(GeometryError::OutOfChart);
        }
        self.inverse_unchecked(y).ok_or(GeometryError::OutOfChart)
    }

    pub(crate) fn inverse_unchecked(&self, y: &[f64]) -> Option<Vec<f64>> {
        let d = self.domain.dim();
        let yd = y[d - 1];
        match &self.kind {
            ChartKind::Arc { center, radius, theta0 } => {
                let a = theta0 + y[0] / radius;
                let rho = radius - yd;
                Some(vec![center[0] + rho * a.cos(), center[1] + rho * a.sin()])
            }
            ChartKind::Frame { tangents, normal } => {
                let mut base = self.center.clone();
                for (e, s) in tangents.iter().zip(y) {
                    base = axpy(&base, *s, e);
                }
                let h = self.normal_offset(&base, normal)?;
                let foot = axpy(&base, h, normal);
                let nf = normalize(&self.domain.distance_gradient(&foot));
                Some(axpy(&foot, yd, &nf))
            }
        }
    }

    /// Derivative of the chart map at `x`; closed form for arc charts.
    pub fn forward_jacobian(&self, x: &[f64]) -> nalgebra::DMatrix<f64> {
        match &self.kind {
            ChartKind::Arc { center, radius, .. } => {
                let (dx, dy) = (x[0] - center[0], x[1] - center[1]);
                let rho2 = dx * dx + dy * dy;
                let rho = rho2.sqrt();
                nalgebra::DMatrix::from_row_slice(
                    2,
                    2,
                    &[-radius * dy / rho2, radius * dx / rho2, -dx / rho, -dy / rho],
                )
            }
            ChartKind::Frame { .. } => numdiff::jacobian(|z| self.forward_unchecked(z), x, x.len()),
        }
    }

    /// Derivative of the inverse chart map at `y`; closed form for arc charts.
    pub fn inverse_jacobian(&self, y: &[f64]) -> nalgebra::DMatrix<f64> {
        match &self.kind {
            ChartKind::Arc { radius, theta0, .. } => {
                let a = theta0 + y[0] / radius;
                let s = (radius - y[1]) / radius;
                nalgebra::DMatrix::from_row_slice(2, 2, &[-s * a.sin(), -a.cos(), s * a.cos(), -a.sin()])
            }
            ChartKind::Frame { .. } => {
                let d = y.len();
                numdiff::jacobian(|z| self.inverse_unchecked(z).unwrap_or_else(|| vec![f64::NAN; d]), y, d)
            }
        }
    }

    /// Solves `b(base + h n) = 0` for the offset `h` closest to zero.
    fn normal_offset(&self, base: &[f64], n: &[f64]) -> Option<f64> {
        let g = |h: f64| self.domain.signed_distance(&axpy(base, h, n));
        let g0 = g(0.0);
        if g0 == 0.0 {
            return Some(0.0);
        }
        let lim = 2.0 * self.domain.collar_width.max(self.r);
        let mut step = g0.abs().max(1e-12);
        let dir = if g0 < 0.0 { 1.0 } else { -1.0 };
        let (mut a, mut b) = (0.0, 0.0);
        let mut found = false;
        while step <= 2.0 * lim {
            b = dir * step;
            if g(b) * g0 <= 0.0 {
                found = true;
                break;
            }
            a = b;
            step *= 2.0;
        }
        if !found {
            return None;
        }
        let (mut lo, mut hi) = if a < b { (a, b) } else { (b, a) };
        let glo = g(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let gm = g(mid);
            if gm == 0.0 {
                return Some(mid);
            }
            if (gm > 0.0) == (glo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-16 * (1.0 + lo.abs()) {
                break;
            }
        }
        Some(0.5 * (lo + hi))
    }

    fn sample_points(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let d = self.domain.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rad = self.domain_radius();
        let mut out = Vec::with_capacity(n);
        let mut tries = 0;
        while out.len() < n && tries < 100 * n {
            tries += 1;
            let u = random_unit(&mut rng, d);
            let s: f64 = rng.gen_range(0.0..1.0f64).powf(1.0 / d as f64) * rad;
            let x = axpy(&self.center, s, &u);
            if self.contains(&x) {
                out.push(x);
            }
        }
        out
    }
}

fn wrap_angle(a: f64) -> f64 {
    let tau = 2.0 * std::f64::consts::PI;
    let mut a = a % tau;
    if a > std::f64::consts::PI {
        a -= tau;
    } else if a <= -std::f64::consts::PI {
        a += tau;
    }
    a
}

/// Orthonormal basis of the complement of `n` by Gram-Schmidt on the standard basis.
fn tangent_frame(n: &[f64]) -> Vec<Vec<f64>> {
    let d = n.len();
    let mut basis: Vec<Vec<f64>> = vec![n.to_vec()];
    for k in 0..d {
        if basis.len() == d {
            break;
        }
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        for b in &basis {
            let c = dot(&e, b);
            e = axpy(&e, -c, b);
        }
        if norm(&e) > 1e-6 {
            basis.push(normalize(&e));
        }
    }
    basis.remove(0);
    basis
}

pub fn chart_forward(chart: &Chart, x: &[f64]) -> Result<Vec<f64>, GeometryError> {
    chart.forward(x)
}

pub fn chart_inverse(chart: &Chart, y: &[f64]) -> Result<Vec<f64>, GeometryError> {
    chart.inverse(y)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Atlas {
    pub charts: Vec<Chart>,
    pub c_bound: f64,
    /// Min outer radius, capped at 1/2.
    pub r: f64,
    /// Min inner radius, capped at 1/2.
    pub r_hat: f64,
}

impl Atlas {
    /// Collar band `V = {x : d(x, boundary) <= 2 r_hat}` inside the closure.
    pub fn in_collar(&self, domain: &Domain, x: &[f64]) -> bool {
        domain.signed_distance(x) <= 2.0 * self.r_hat
    }

    /// Index of the chart whose centre is nearest to `x`.
    pub fn nearest_chart(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (i, c) in self.charts.iter().enumerate() {
            let dd = dist(&c.center, x);
            if dd < bd {
                bd = dd;
                best = i;
            }
        }
        best
    }

    /// Worst ratio `min_j |x - xi_j| / r_hat_j` over boundary samples; covering holds when <= 1.
    pub fn covering_ratio(&self, samples: &[Vec<f64>]) -> f64 {
        samples
            .iter()
            .map(|x| {
                self.charts
                    .iter()
                    .map(|c| dist(x, &c.center) / c.r_hat)
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    }
}

const C_SAFETY: f64 = 1.25;
const C_SAMPLES: usize = 96;

/// Builds a covering atlas with inner radius `target_r_hat`.
pub fn build_atlas(domain: &Domain, target_r_hat: f64) -> Result<Atlas, GeometryError> {
    if !(target_r_hat > 0.0) || target_r_hat > domain.collar_width / 4.0 {
        return Err(GeometryError::ChartFailure {
            r_hat: target_r_hat,
            reason: format!("r_hat must lie in (0, collar_width/4 = {}]", domain.collar_width / 4.0),
        });
    }
    let centers = chart_centers(domain, target_r_hat);
    let kappa = domain.curvature_bound();
    let mut charts = Vec::with_capacity(centers.len());
    for (j, xi) in centers.into_iter().enumerate() {
        let mut chart = Chart::new(domain, xi, target_r_hat)?;
        // invertibility margin of D(psi^-1) = A + B with |B| <= |y_d| |Dn| |D phi^-1|
        let d = domain.dim();
        let zero = vec![0.0; d];
        let a = numdiff::jacobian(|y| chart.inverse_unchecked(y).unwrap_or_else(|| vec![f64::NAN; d]), &zero, d);
        let a_norm = numdiff::spectral_norm(&a);
        let a_inv_norm = a
            .clone()
            .try_inverse()
            .map(|m| numdiff::spectral_norm(&m))
            .unwrap_or(f64::INFINITY);
        let margin = 4.0 * target_r_hat * kappa * a_norm * a_inv_norm;
        if !(margin < 1.0) {
            return Err(GeometryError::ChartFailure {
                r_hat: target_r_hat,
                reason: format!("normal-offset margin {margin:.4} is not below 1"),
            });
        }
        let samples = chart.sample_points(C_SAMPLES, 0x5eed ^ j as u64);
        let mut c_est: f64 = 1.0;
        let mut r_sup: f64 = 0.0;
        let fwd = |x: &[f64]| chart.forward_unchecked(x);
        let inv = |y: &[f64]| chart.inverse_unchecked(y).unwrap_or_else(|| vec![f64::NAN; d]);
        for x in &samples {
            let y = fwd(x);
            r_sup = r_sup.max(norm(&y));
            let j1 = numdiff::spectral_norm(&numdiff::jacobian(fwd, x, d));
            let j2 = numdiff::second_derivative_norm(&fwd, x, d);
            let j3 = numdiff::spectral_norm(&numdiff::jacobian(inv, &y, d));
            let j4 = numdiff::second_derivative_norm(&inv, &y, d);
            for v in [j1, j2, j3, j4] {
                if !v.is_finite() {
                    return Err(GeometryError::ChartFailure {
                        r_hat: target_r_hat,
                        reason: "non-finite chart derivative".into(),
                    });
                }
                c_est = c_est.max(v);
            }
        }
        chart.c_bound = (C_SAFETY * c_est).max(1.0);
        chart.r = (1.05 * r_sup).max(chart.domain_radius());
        charts.push(chart);
    }
    let c_bound = charts.iter().map(|c| c.c_bound).fold(1.0, f64::max);
    let r = charts.iter().map(|c| c.r).fold(0.5, f64::min);
    let r_hat = charts.iter().map(|c| c.r_hat).fold(0.5, f64::min);
    Ok(Atlas { charts, c_bound, r, r_hat })
}

fn chart_centers(domain: &Domain, r_hat: f64) -> Vec<Vec<f64>> {
    match &domain.shape {
        Shape::Interval { lo, hi } => vec![vec![*lo], vec![*hi]],
        Shape::Ball { center, radius } if center.len() == 2 => {
            // chord from any boundary point to the nearest centre stays below 0.99 r_hat
            let half_angle = 2.0 * (0.99 * r_hat / (2.0 * radius)).min(1.0).asin();
            let n = ((std::f64::consts::PI / half_angle).ceil() as usize).max(16);
            (0..n)
                .map(|i| {
                    let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                    vec![center[0] + radius * a.cos(), center[1] + radius * a.sin()]
                })
                .collect()
        }
        _ => {
            // greedy cover of dense boundary samples
            let dense = domain.boundary_samples(20_000, 0xa71a5);
            let mut centers: Vec<Vec<f64>> = Vec::new();
            for p in dense {
                if centers.iter().all(|c| dist(c, &p) > 0.9 * r_hat) {
                    centers.push(p);
                }
            }
            centers
        }
    }
}

/// Sampled invariant checks used by the audit suite.
pub mod audit {
    use super::*;

    #[derive(Clone, Debug, Serialize)]
    pub struct CheckRow {
        pub check: String,
        pub worst: f64,
        pub tolerance: f64,
        pub pass: bool,
    }

    fn row(check: &str, worst: f64, tolerance: f64) -> CheckRow {
        CheckRow { check: check.into(), worst, tolerance, pass: worst.is_finite() && worst <= tolerance }
    }

    /// Runs the domain, projection and chart invariants on `n` samples.
    pub fn run(domain: &Domain, atlas: &Atlas, n: usize, seed: u64) -> Vec<CheckRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = domain.dim();
        let (lo, hi) = domain.working_box();
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|i| rng.gen_range(lo[i]..hi[i])).collect())
            .collect();
        let mut rows = Vec::new();

        let mut lip: f64 = 0.0;
        for w in pts.windows(2) {
            let gap = (domain.signed_distance(&w[0]) - domain.signed_distance(&w[1])).abs() - dist(&w[0], &w[1]);
            lip = lip.max(gap);
        }
        rows.push(row("distance_1_lipschitz", lip, 1e-12));

        let collar: Vec<&Vec<f64>> = pts
            .iter()
            .filter(|x| domain.signed_distance(x).abs() < domain.collar_width)
            .collect();
        let mut grad_err: f64 = 0.0;
        let mut idem: f64 = 0.0;
        let mut decomp: f64 = 0.0;
        for x in &collar {
            let g = numdiff::gradient(|y| domain.signed_distance(y), x);
            grad_err = grad_err.max((norm(&g) - 1.0).abs());
            let p = boundary_projection(domain, x).expect("collar point");
            let pp = axpy(&p, -domain.signed_distance(&p), &domain.distance_gradient(&p));
            idem = idem.max(dist(&p, &pp));
            let n = normalize(&domain.distance_gradient(&p));
            decomp = decomp.max(dist(x, &axpy(&p, domain.signed_distance(x), &n)));
        }
        rows.push(row("distance_gradient_unit", grad_err, 1e-6));
        rows.push(row("projection_idempotent", idem, 1e-10));
        rows.push(row("projection_decomposition", decomp, 1e-8));

        // normal segments must stay minimizing across the whole claimed collar
        let bnd = domain.boundary_samples(256, seed ^ 0xb0);
        let mut seg: f64 = 0.0;
        for xi in &bnd {
            let n = normalize(&domain.distance_gradient(xi));
            for frac in [0.5, 0.9, 0.999] {
                let t = frac * domain.collar_width;
                seg = seg.max((domain.signed_distance(&axpy(xi, t, &n)) - t).abs());
            }
        }
        rows.push(row("projection_normal_segments", seg, 1e-8));
        rows.push(row(
            "collar_reach",
            domain.collar_width * domain.curvature_bound(),
            1.0 - 1e-12,
        ));

        let mut last: f64 = 0.0;
        let mut roundtrip: f64 = 0.0;
        let mut deriv_ratio: f64 = 0.0;
        for (j, chart) in atlas.charts.iter().enumerate() {
            let samples = chart.sample_points((n / atlas.charts.len()).max(8), seed ^ (j as u64) << 8);
            for x in &samples {
                let y = chart.forward(x).expect("sample inside chart");
                last = last.max((y[d - 1] - domain.signed_distance(x)).abs());
                if let Ok(z) = chart.inverse(&y) {
                    roundtrip = roundtrip.max(dist(&z, x));
                } else {
                    roundtrip = f64::INFINITY;
                }
                let jac = numdiff::jacobian(|p| chart.forward_unchecked(p), x, d);
                deriv_ratio = deriv_ratio.max(numdiff::spectral_norm(&jac) / chart.c_bound);
            }
            last = last.max(norm(&chart.forward(&chart.center).unwrap_or_default()));
        }
        rows.push(row("chart_last_coordinate", last, 1e-8));
        rows.push(row("chart_roundtrip", roundtrip, 1e-8));
        rows.push(row("chart_derivative_bound", deriv_ratio, 1.0));
        let cover = domain.boundary_samples(10_000, seed ^ 0xc0);
        rows.push(row("atlas_covering", atlas.covering_ratio(&cover), 1.0));
        rows
    }
}
