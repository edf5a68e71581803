//! Pointwise dual-metric conditions.
//!
//! With `W = M^{-1}` and the closed-loop drift Jacobian `A`, a valid dual
//! metric satisfies, at every point of the working domain,
//!
//! ```text
//! (C1)  B_perp^T ( W A^T + A W - W_dot + 2 lambda W ) B_perp <= 0
//! (C2)  d_{b_i} W - W (db_i/dx)^T - (db_i/dx) W = 0   for every input column
//! ```
//!
//! where `W_dot` is the directional derivative of `W` along the supplied
//! state velocity and `B_perp` is an orthonormal annihilator of the input
//! matrix. C2 removes the input dependence of C1 whenever it holds.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{closed_loop_jacobian, SystemModel};

use super::metric::MetricFamily;

pub const C1_DEFAULT_TOL: f64 = 1e-8;
pub const C2_DEFAULT_TOL: f64 = 1e-8;

/// Orthonormal basis of the null space of `B^T`, i.e. a matrix with
/// `B_perp^T B = 0` and `B_perp^T B_perp = I`. For square full-rank `B` the
/// result has zero columns.
pub fn annihilator(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = b.shape();
    if m > n {
        return Err(Error::Degenerate(format!(
            "input matrix is {n}x{m}; more inputs than states"
        )));
    }
    if m > 0 {
        let svals = b.clone().svd(false, false).singular_values;
        let smax = svals.max();
        let smin = svals.min();
        if !(smin > 1e-12 * smax.max(1.0)) {
            return Err(Error::Degenerate(format!(
                "input matrix is rank deficient (singular values {smin:.3e} .. {smax:.3e})"
            )));
        }
    }
    if n == m {
        return Ok(DMatrix::zeros(n, 0));
    }

    // eigenvectors of the complement projector I - B (B^T B)^{-1} B^T
    let projector = if m == 0 {
        DMatrix::identity(n, n)
    } else {
        let gram = b.transpose() * b;
        let gram_inv = gram
            .cholesky()
            .ok_or_else(|| Error::Degenerate("input Gram matrix not invertible".into()))?
            .inverse();
        DMatrix::identity(n, n) - b * gram_inv * b.transpose()
    };
    let eig = projector.symmetric_eigen();
    let mut cols: Vec<(f64, DVector<f64>)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned()))
        .filter(|(v, _)| *v > 0.5)
        .collect();
    if cols.len() != n - m {
        return Err(Error::Numeric(format!(
            "annihilator projector has {} unit eigenvalues, expected {}",
            cols.len(),
            n - m
        )));
    }
    // deterministic column order and sign
    cols.sort_by(|a, b| {
        let ka = a.1.iter().position(|v| v.abs() > 1e-9).unwrap_or(0);
        let kb = b.1.iter().position(|v| v.abs() > 1e-9).unwrap_or(0);
        ka.cmp(&kb).then(a.1[ka].partial_cmp(&b.1[kb]).unwrap().reverse())
    });
    let mut out = DMatrix::zeros(n, n - m);
    for (j, (_, mut v)) in cols.into_iter().enumerate() {
        if let Some(k) = v.iter().position(|c| c.abs() > 1e-9) {
            if v[k] < 0.0 {
                v = -v;
            }
        }
        out.set_column(j, &v);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct C1Report {
    /// Largest eigenvalue of the projected matrix; `-inf` when the
    /// projection is empty (fully actuated system).
    pub max_eig: f64,
    pub pass: bool,
}

/// Evaluates C1 at a point. `x_dot` supplies the state velocity used in the
/// directional derivative of the dual metric (pass the full closed-loop
/// drift including the input).
#[allow(clippy::too_many_arguments)]
pub fn check_c1(
    metric: &MetricFamily,
    model: &SystemModel,
    x: &DVector<f64>,
    theta: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
    x_dot: &DVector<f64>,
    tol: f64,
) -> Result<C1Report> {
    let b = model.input_matrix(x, t);
    let b_perp = annihilator(&b)?;
    if b_perp.ncols() == 0 {
        return Ok(C1Report { max_eig: f64::NEG_INFINITY, pass: true });
    }
    let (w, dw_dx) = metric.dual_partials_x(x, theta, t)?;
    let a = closed_loop_jacobian(model, x, theta, u, t)?;
    let mut w_dot = DMatrix::zeros(w.nrows(), w.ncols());
    for (k, dw) in dw_dx.iter().enumerate() {
        w_dot += dw * x_dot[k];
    }
    let phi = &w * a.transpose() + &a * &w - w_dot + &w * (2.0 * metric.lambda());
    let g = b_perp.transpose() * phi * &b_perp;
    let asym = (&g - g.transpose()).amax();
    if asym > 1e-10 * g.amax().max(1.0) {
        return Err(Error::Numeric(format!(
            "projected contraction matrix not symmetric (asymmetry {asym:.3e})"
        )));
    }
    let g_sym = (&g + g.transpose()) * 0.5;
    let max_eig = g_sym.symmetric_eigen().eigenvalues.max();
    Ok(C1Report { max_eig, pass: max_eig <= tol })
}

#[derive(Debug, Clone)]
pub struct C2Report {
    /// Frobenius norm of the C2 residual for each input column.
    pub residuals: Vec<f64>,
    pub pass: bool,
}

/// Evaluates C2 at a point: the Killing-type condition making the dual
/// metric compatible with each input column.
pub fn check_c2(
    metric: &MetricFamily,
    model: &SystemModel,
    x: &DVector<f64>,
    theta: &DVector<f64>,
    t: f64,
    tol: f64,
) -> Result<C2Report> {
    let (w, dw_dx) = metric.dual_partials_x(x, theta, t)?;
    let b = model.input_matrix(x, t);
    let mut residuals = Vec::with_capacity(model.input_dim());
    for i in 0..model.input_dim() {
        let jb = model.jac_input_col(i, x, t);
        let mut dir = DMatrix::zeros(w.nrows(), w.ncols());
        for (k, dw) in dw_dx.iter().enumerate() {
            dir += dw * b[(k, i)];
        }
        let r = dir - &w * jb.transpose() - jb * &w;
        residuals.push(r.norm());
    }
    let pass = residuals.iter().all(|r| *r <= tol);
    Ok(C2Report { residuals, pass })
}
