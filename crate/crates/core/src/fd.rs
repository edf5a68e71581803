//! Central finite-difference oracles.
//!
//! These helpers are deliberately independent of every analytic derivative
//! in the crate; tests use them to cross-check hand-derived Jacobians,
//! gradients, and metric derivatives.

use nalgebra::{DMatrix, DVector};

/// Central-difference Jacobian of `f: R^n -> R^m` at `x`.
pub fn jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, n);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let df = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.set_column(j, &df);
    }
    jac
}

/// Central-difference gradient of a scalar function.
pub fn gradient<F>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let n = x.len();
    DVector::from_fn(n, |j, _| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

/// Central-difference derivative of a scalar function of a scalar.
pub fn derivative<F>(f: F, x: f64, h: f64) -> f64
where
    F: Fn(f64) -> f64,
{
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central-difference partial of a matrix-valued function along coordinate `j`.
pub fn matrix_partial<F>(f: F, x: &DVector<f64>, j: usize, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let mut xp = x.clone();
    let mut xm = x.clone();
    xp[j] += h;
    xm[j] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Max relative error between two matrices, with an absolute floor so that
/// near-zero entries compare absolutely.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let scale = x.abs().max(y.abs()).max(floor);
        worst = worst.max((x - y).abs() / scale);
    }
    worst
}

/// Vector counterpart of [`rel_err`].
pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>, floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let scale = x.abs().max(y.abs()).max(floor);
        worst = worst.max((x - y).abs() / scale);
    }
    worst
}
