//! Central finite differences with a relative step.

use nalgebra::DMatrix;

pub const REL_STEP: f64 = 1e-5;

pub fn step_for(x: f64) -> f64 {
    REL_STEP * x.abs().max(1.0)
}

/// Gradient of a scalar function.
pub fn gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = step_for(x[i]);
            y[i] = x[i] + h;
            let fp = f(&y);
            y[i] = x[i] - h;
            let fm = f(&y);
            y[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Jacobian `J[i][j] = d f_i / d x_j` of a vector function with `m` outputs.
pub fn jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], m: usize) -> DMatrix<f64> {
    let n = x.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut y = x.to_vec();
    for j in 0..n {
        let h = step_for(x[j]);
        y[j] = x[j] + h;
        let fp = f(&y);
        y[j] = x[j] - h;
        let fm = f(&y);
        y[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Frobenius norm of the second derivative of a vector function, taken as a
/// finite difference of its Jacobian. Bounds the operator norm of the
/// bilinear map from above.
pub fn second_derivative_norm(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], m: usize) -> f64 {
    let n = x.len();
    let mut y = x.to_vec();
    let mut acc = 0.0;
    let h2 = 1e-4;
    for k in 0..n {
        let h = h2 * x[k].abs().max(1.0);
        y[k] = x[k] + h;
        let jp = jacobian(f, &y, m);
        y[k] = x[k] - h;
        let jm = jacobian(f, &y, m);
        y[k] = x[k];
        let d = (jp - jm) / (2.0 * h);
        acc += d.iter().map(|v| v * v).sum::<f64>();
    }
    acc.sqrt()
}

/// Spectral norm of a matrix.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.clone().singular_values().max()
}
