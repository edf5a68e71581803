//! Discrete geodesics: piecewise-linear curves minimizing the trapezoidal
//! Riemannian energy
//!
//! ```text
//! E = sum_k (N/2) (g_{k+1} - g_k)^T [M(g_k) + M(g_{k+1})] (g_{k+1} - g_k)
//! ```
//!
//! over the interior nodes, with the endpoints pinned at the reference
//! state and the current state. For a constant metric the minimizer is the
//! uniformly spaced straight segment and `E` equals the squared metric
//! distance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

use super::metric::MetricFamily;
use super::optim::{minimize, MinimizeOptions, MinimizeOutcome};

#[derive(Debug, Clone, Copy)]
pub struct GeodesicOptions {
    /// Number of segments N (N + 1 nodes).
    pub segments: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub rel_decrease_tol: f64,
    /// L-BFGS history length.
    pub memory: usize,
}

impl Default for GeodesicOptions {
    fn default() -> Self {
        Self {
            segments: 10,
            max_iters: 200,
            grad_tol: 1e-8,
            rel_decrease_tol: 1e-12,
            memory: 8,
        }
    }
}

/// A solved (or best-effort) discrete geodesic.
#[derive(Debug, Clone)]
pub struct Geodesic {
    nodes: Vec<DVector<f64>>,
    speeds: Vec<DVector<f64>>,
    energy: f64,
    converged: bool,
    residual: f64,
    iterations: usize,
}

impl Geodesic {
    pub fn nodes(&self) -> &[DVector<f64>] {
        &self.nodes
    }

    /// Curve speeds at the nodes; one-sided at the ends, central inside.
    pub fn speeds(&self) -> &[DVector<f64>] {
        &self.speeds
    }

    pub fn segments(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn start(&self) -> &DVector<f64> {
        &self.nodes[0]
    }

    pub fn end(&self) -> &DVector<f64> {
        &self.nodes[self.nodes.len() - 1]
    }

    /// Speed at s = 1 (the current-state end).
    pub fn end_speed(&self) -> &DVector<f64> {
        &self.speeds[self.speeds.len() - 1]
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Final gradient norm of the energy over the interior nodes.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Marks a best-effort curve as accepted, keeping its residual. This is
    /// the hook for callers whose non-convergence policy is to continue
    /// with the best iterate found.
    pub fn accept_best_effort(mut self) -> Geodesic {
        self.converged = true;
        self
    }
}

/// Discrete energy of a fixed solved curve re-evaluated at a (possibly
/// different) parameter vector.
pub fn energy_along(
    metric: &MetricFamily,
    geo: &Geodesic,
    theta: &DVector<f64>,
    t: f64,
) -> crate::error::Result<f64> {
    discrete_energy(metric, theta, t, geo.nodes())
}

/// Metric evaluated at every node; fails with a degeneracy error when any
/// node metric is not positive definite.
pub(super) fn node_metrics(
    metric: &MetricFamily,
    theta: &DVector<f64>,
    t: f64,
    nodes: &[DVector<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    nodes
        .iter()
        .map(|g| {
            let m = metric.metric_at(g, theta, t)?;
            if m.clone().cholesky().is_none() {
                return Err(Error::Degenerate(
                    "indefinite metric encountered along geodesic".into(),
                ));
            }
            Ok(m)
        })
        .collect()
}

pub(super) fn discrete_energy(
    metric: &MetricFamily,
    theta: &DVector<f64>,
    t: f64,
    nodes: &[DVector<f64>],
) -> Result<f64> {
    let ms = node_metrics(metric, theta, t, nodes)?;
    let nseg = nodes.len() - 1;
    let nf = nseg as f64;
    let mut e = 0.0;
    for k in 0..nseg {
        let d = &nodes[k + 1] - &nodes[k];
        e += 0.5 * nf * (d.dot(&(&ms[k] * &d)) + d.dot(&(&ms[k + 1] * &d)));
    }
    Ok(e)
}

fn check_spd(m: &DMatrix<f64>) -> Result<()> {
    if m.clone().cholesky().is_none() {
        return Err(Error::Degenerate(
            "indefinite metric encountered along geodesic".into(),
        ));
    }
    Ok(())
}

fn energy_and_interior_grad(
    metric: &MetricFamily,
    theta: &DVector<f64>,
    t: f64,
    nodes: &[DVector<f64>],
) -> Result<(f64, Vec<DVector<f64>>)> {
    let n = nodes[0].len();
    let nseg = nodes.len() - 1;
    let nf = nseg as f64;

    // one bundled evaluation per node: metric everywhere, partials only
    // where the gradient needs them (interior nodes)
    let mut ms: Vec<DMatrix<f64>> = Vec::with_capacity(nodes.len());
    let mut parts: Vec<Option<Vec<DMatrix<f64>>>> = Vec::with_capacity(nodes.len());
    for (k, node) in nodes.iter().enumerate() {
        if k == 0 || k == nseg {
            let m = metric.metric_at(node, theta, t)?;
            check_spd(&m)?;
            ms.push(m);
            parts.push(None);
        } else {
            let (m, dm) = metric.metric_with_x_partials(node, theta, t)?;
            check_spd(&m)?;
            ms.push(m);
            parts.push(Some(dm));
        }
    }

    let deltas: Vec<DVector<f64>> = (0..nseg).map(|k| &nodes[k + 1] - &nodes[k]).collect();
    let mut e = 0.0;
    for k in 0..nseg {
        e += 0.5
            * nf
            * (deltas[k].dot(&(&ms[k] * &deltas[k])) + deltas[k].dot(&(&ms[k + 1] * &deltas[k])));
    }

    let mut grads = Vec::with_capacity(nseg - 1);
    for j in 1..nseg {
        let mut g = (&ms[j - 1] + &ms[j]) * &deltas[j - 1] * nf;
        g -= (&ms[j] + &ms[j + 1]) * &deltas[j] * nf;
        let dm = parts[j].as_ref().expect("interior node has partials");
        let mut q = DVector::zeros(n);
        for l in 0..n {
            q[l] = deltas[j - 1].dot(&(&dm[l] * &deltas[j - 1]))
                + deltas[j].dot(&(&dm[l] * &deltas[j]));
        }
        g += q * (0.5 * nf);
        grads.push(g);
    }
    Ok((e, grads))
}

fn node_speeds(nodes: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let nseg = nodes.len() - 1;
    let nf = nseg as f64;
    let mut speeds = Vec::with_capacity(nodes.len());
    // second-order one-sided differences at the ends, central inside
    speeds.push((-&nodes[2] + &nodes[1] * 4.0 - &nodes[0] * 3.0) * (0.5 * nf));
    for k in 1..nseg {
        speeds.push((&nodes[k + 1] - &nodes[k - 1]) * (0.5 * nf));
    }
    speeds.push((&nodes[nseg] * 3.0 - &nodes[nseg - 1] * 4.0 + &nodes[nseg - 2]) * (0.5 * nf));
    speeds
}

fn straight_line(x_d: &DVector<f64>, x: &DVector<f64>, nseg: usize) -> Vec<DVector<f64>> {
    (0..=nseg)
        .map(|k| {
            let s = k as f64 / nseg as f64;
            x_d * (1.0 - s) + x * s
        })
        .collect()
}

/// Solves for the minimum-energy curve from `x_d` (s = 0) to `x` (s = 1).
///
/// Starts from the straight segment, or from `warm_start` remapped onto the
/// new endpoints. Non-convergence within the iteration budget returns the
/// best iterate with `converged = false`; the caller decides the policy.
pub fn solve_geodesic(
    metric: &MetricFamily,
    theta_hat: &DVector<f64>,
    x_d: &DVector<f64>,
    x: &DVector<f64>,
    t: f64,
    warm_start: Option<&Geodesic>,
    opts: &GeodesicOptions,
) -> Result<Geodesic> {
    let n = metric.state_dim();
    if x_d.len() != n || x.len() != n {
        return Err(Error::config(format!(
            "geodesic endpoints must live in dimension {n}"
        )));
    }
    if opts.segments < 2 {
        return Err(Error::config("geodesic discretization needs at least 2 segments"));
    }
    let nseg = opts.segments;

    if x == x_d {
        let nodes = vec![x_d.clone(); nseg + 1];
        let speeds = vec![DVector::zeros(n); nseg + 1];
        return Ok(Geodesic {
            nodes,
            speeds,
            energy: 0.0,
            converged: true,
            residual: 0.0,
            iterations: 0,
        });
    }

    let init_nodes = match warm_start {
        Some(w) if w.segments() == nseg => {
            // carry over the interior shape, remapped affinely to the new endpoints
            let d0 = x_d - w.start();
            let d1 = x - w.end();
            w.nodes
                .iter()
                .enumerate()
                .map(|(k, g)| {
                    let s = k as f64 / nseg as f64;
                    g + &d0 * (1.0 - s) + &d1 * s
                })
                .collect()
        }
        _ => straight_line(x_d, x, nseg),
    };

    let flatten = |nodes: &[DVector<f64>]| -> DVector<f64> {
        DVector::from_iterator(
            (nseg - 1) * n,
            nodes[1..nseg].iter().flat_map(|g| g.iter().copied()),
        )
    };
    let unflatten = |z: &DVector<f64>| -> Vec<DVector<f64>> {
        let mut nodes = Vec::with_capacity(nseg + 1);
        nodes.push(x_d.clone());
        for j in 0..nseg - 1 {
            nodes.push(DVector::from_iterator(n, (0..n).map(|i| z[j * n + i])));
        }
        nodes.push(x.clone());
        nodes
    };

    let objective = |z: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let nodes = unflatten(z);
        let (e, grads) = energy_and_interior_grad(metric, theta_hat, t, &nodes)?;
        let g = DVector::from_iterator(
            (nseg - 1) * n,
            grads.iter().flat_map(|g| g.iter().copied()),
        );
        Ok((e, g))
    };

    let MinimizeOutcome {
        x: z,
        value,
        grad_norm,
        iterations,
        converged_grad,
        converged_decrease,
    } = minimize(
        objective,
        flatten(&init_nodes),
        &MinimizeOptions {
            max_iters: opts.max_iters,
            grad_tol: opts.grad_tol,
            rel_decrease_tol: opts.rel_decrease_tol,
            memory: opts.memory,
        },
    )?;

    let nodes = unflatten(&z);
    let speeds = node_speeds(&nodes);
    Ok(Geodesic {
        nodes,
        speeds,
        energy: value,
        converged: converged_grad || converged_decrease,
        residual: grad_norm,
        iterations,
    })
}
