//! Small L-BFGS minimizer with Armijo backtracking.
//!
//! Shared by the geodesic solver and the metric coefficient fitter. The
//! line search only accepts steps that decrease the objective, so iterates
//! are monotone.

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::error::Result;

pub(crate) struct MinimizeOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub rel_decrease_tol: f64,
    pub memory: usize,
}

pub(crate) struct MinimizeOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Gradient tolerance reached.
    pub converged_grad: bool,
    /// Relative decrease fell below tolerance.
    pub converged_decrease: bool,
}

pub(crate) fn minimize<F>(
    mut f: F,
    x0: DVector<f64>,
    opts: &MinimizeOptions,
) -> Result<MinimizeOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let mut x = x0;
    let (mut val, mut grad) = f(&x)?;
    let mut s_hist: VecDeque<DVector<f64>> = VecDeque::new();
    let mut y_hist: VecDeque<DVector<f64>> = VecDeque::new();

    let mut converged_grad = grad.norm() <= opts.grad_tol;
    let mut converged_decrease = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iters {
        if converged_grad {
            break;
        }
        let mut dir = two_loop(&grad, &s_hist, &y_hist);
        if dir.dot(&grad) >= 0.0 {
            dir = -grad.clone();
        }

        let mut step = if iter == 0 && s_hist.is_empty() {
            1.0 / grad.norm().max(1.0)
        } else {
            1.0
        };
        let slope = dir.dot(&grad);
        let mut accepted = None;
        for _ in 0..40 {
            let x_new = &x + &dir * step;
            let (v_new, g_new) = f(&x_new)?;
            if v_new.is_finite() && v_new <= val + 1e-4 * step * slope {
                accepted = Some((x_new, v_new, g_new));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, v_new, g_new)) = accepted else {
            break; // stalled: no decreasing step along this direction
        };

        let s = &x_new - &x;
        let y = &g_new - &grad;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if s_hist.len() == opts.memory {
                s_hist.pop_front();
                y_hist.pop_front();
            }
            s_hist.push_back(s);
            y_hist.push_back(y);
        }

        let rel_dec = (val - v_new) / val.abs().max(1e-300);
        x = x_new;
        val = v_new;
        grad = g_new;
        iterations = iter + 1;

        converged_grad = grad.norm() <= opts.grad_tol;
        if !converged_grad && rel_dec < opts.rel_decrease_tol {
            converged_decrease = true;
            break;
        }
    }

    Ok(MinimizeOutcome {
        grad_norm: grad.norm(),
        x,
        value: val,
        iterations,
        converged_grad,
        converged_decrease,
    })
}

fn two_loop(
    grad: &DVector<f64>,
    s_hist: &VecDeque<DVector<f64>>,
    y_hist: &VecDeque<DVector<f64>>,
) -> DVector<f64> {
    if s_hist.is_empty() {
        return -grad.clone();
    }
    let k = s_hist.len();
    let mut alpha = vec![0.0; k];
    let mut q = grad.clone();
    for i in (0..k).rev() {
        let rho = 1.0 / y_hist[i].dot(&s_hist[i]);
        alpha[i] = rho * s_hist[i].dot(&q);
        q -= &y_hist[i] * alpha[i];
    }
    let gamma = s_hist[k - 1].dot(&y_hist[k - 1]) / y_hist[k - 1].dot(&y_hist[k - 1]);
    let mut z = q * gamma;
    for i in 0..k {
        let rho = 1.0 / y_hist[i].dot(&s_hist[i]);
        let beta = rho * y_hist[i].dot(&z);
        z += &s_hist[i] * (alpha[i] - beta);
    }
    -z
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_convex_quadratic() {
        // f(x) = 1/2 sum i (x_i - i)^2
        let f = |x: &DVector<f64>| {
            let n = x.len();
            let mut v = 0.0;
            let mut g = DVector::zeros(n);
            for i in 0..n {
                let d = x[i] - (i as f64 + 1.0);
                v += 0.5 * (i as f64 + 1.0) * d * d;
                g[i] = (i as f64 + 1.0) * d;
            }
            Ok((v, g))
        };
        let out = minimize(
            f,
            DVector::zeros(5),
            &MinimizeOptions {
                max_iters: 200,
                grad_tol: 1e-10,
                rel_decrease_tol: 1e-14,
                memory: 6,
            },
        )
        .unwrap();
        assert!(out.converged_grad);
        for i in 0..5 {
            assert!((out.x[i] - (i as f64 + 1.0)).abs() < 1e-8);
        }
    }

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &DVector<f64>| {
            let (a, b) = (1.0, 100.0);
            let v = (a - x[0]).powi(2) + b * (x[1] - x[0] * x[0]).powi(2);
            let g = DVector::from_vec(vec![
                -2.0 * (a - x[0]) - 4.0 * b * x[0] * (x[1] - x[0] * x[0]),
                2.0 * b * (x[1] - x[0] * x[0]),
            ]);
            Ok((v, g))
        };
        let out = minimize(
            f,
            DVector::from_vec(vec![-1.2, 1.0]),
            &MinimizeOptions {
                max_iters: 500,
                grad_tol: 1e-8,
                rel_decrease_tol: 1e-16,
                memory: 8,
            },
        )
        .unwrap();
        assert!(out.value < 1e-12, "rosenbrock value {}", out.value);
    }
}
