//! Riemannian-energy derivatives and the energy-driven adaptation law.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lyap::{rho_rate_from_drift, AdaptGains, AdaptRates, AdaptState, ScalingFunction};
use crate::model::SystemModel;

use super::geodesic::Geodesic;
use super::metric::MetricFamily;

fn require_converged(geo: &Geodesic) -> Result<()> {
    if !geo.converged() {
        return Err(Error::Precondition(format!(
            "geodesic did not converge (residual {:.3e})",
            geo.residual()
        )));
    }
    Ok(())
}

/// Parameter gradient of the energy along the fixed solved geodesic:
///
/// ```text
/// dE/dtheta_i = sum_k (N/2) d_k^T [dM/dtheta_i(g_k) + dM/dtheta_i(g_{k+1})] d_k
/// ```
///
/// First-order node variations do not contribute at a minimizer, so the
/// curve is held fixed.
pub fn energy_param_grad(
    metric: &MetricFamily,
    geo: &Geodesic,
    theta_hat: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    require_converged(geo)?;
    let nodes = geo.nodes();
    let nseg = geo.segments();
    let nf = nseg as f64;
    let p = metric.param_dim();
    let parts: Vec<Vec<DMatrix<f64>>> = nodes
        .iter()
        .map(|g| metric.metric_with_theta_partials(g, theta_hat, t).map(|(_, dm)| dm))
        .collect::<Result<_>>()?;
    let mut grad = DVector::zeros(p);
    for k in 0..nseg {
        let d = &nodes[k + 1] - &nodes[k];
        for i in 0..p {
            grad[i] +=
                0.5 * nf * (d.dot(&(&parts[k][i] * &d)) + d.dot(&(&parts[k + 1][i] * &d)));
        }
    }
    Ok(grad)
}

/// Endpoint gradients `(dE/dg_0, dE/dg_N)` of the discrete energy. Together
/// with [`energy_param_grad`] these give the exact total derivative of the
/// solved energy under endpoint and parameter motion (interior nodes are
/// stationary at a minimizer).
pub fn energy_endpoint_grads(
    metric: &MetricFamily,
    geo: &Geodesic,
    theta_hat: &DVector<f64>,
    t: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    require_converged(geo)?;
    let nodes = geo.nodes();
    let nseg = geo.segments();
    let nf = nseg as f64;
    let n = nodes[0].len();

    let d0 = &nodes[1] - &nodes[0];
    let dn = &nodes[nseg] - &nodes[nseg - 1];

    let (m0, dm0) = metric.metric_with_x_partials(&nodes[0], theta_hat, t)?;
    let (mn, dmn) = metric.metric_with_x_partials(&nodes[nseg], theta_hat, t)?;
    let m1 = metric.metric_at(&nodes[1], theta_hat, t)?;
    let mn_1 = metric.metric_at(&nodes[nseg - 1], theta_hat, t)?;

    let variation = |dm: &[DMatrix<f64>], v: &DVector<f64>| -> DVector<f64> {
        DVector::from_fn(n, |l, _| v.dot(&(&dm[l] * v)))
    };

    let g0 = -((m0 + m1) * &d0) * nf + variation(&dm0, &d0) * (0.5 * nf);
    let g1 = ((mn_1 + mn) * &dn) * nf + variation(&dmn, &dn) * (0.5 * nf);
    Ok((g0, g1))
}

/// Adaptation law driven by the Riemannian energy:
///
/// ```text
/// theta_hat_dot = -upsilon(rho) Gamma Delta(x,t) M(x, theta_hat, t) gamma_s(1)
/// rho_dot       = -(upsilon/upsilon_rho) * 1/(E + eta) * sum_i dE/dtheta_i theta_hat_dot_i
/// ```
#[allow(clippy::too_many_arguments)]
pub fn adapt_rhs_uccm(
    model: &SystemModel,
    metric: &MetricFamily,
    scaling: &ScalingFunction,
    gains: &AdaptGains,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    state: &AdaptState,
    geo: &Geodesic,
    t: f64,
) -> Result<AdaptRates> {
    require_converged(geo)?;
    let endpoint_tol = 1e-9 * (1.0 + x.amax().max(x_d.amax()));
    if (geo.start() - x_d).amax() > endpoint_tol || (geo.end() - x).amax() > endpoint_tol {
        return Err(Error::Precondition(
            "geodesic endpoints do not match (x_d, x)".into(),
        ));
    }
    let (ups, ups_rho) = scaling.eval(state.rho);
    if !(ups_rho > 0.0) {
        return Err(Error::Invariant(format!(
            "scaling function not strictly increasing at rho = {} (upsilon_rho = {ups_rho})",
            state.rho
        )));
    }
    let m_end = metric.metric_at(x, &state.theta_hat, t)?;
    let delta = model.regressor(x, t);
    let theta_hat_dot = -(gains.gamma() * (delta * (m_end * geo.end_speed()))) * ups;
    let de_dtheta = energy_param_grad(metric, geo, &state.theta_hat, t)?;
    let rho_dot = rho_rate_from_drift(
        scaling,
        state.rho,
        geo.energy(),
        gains.eta(),
        de_dtheta.dot(&theta_hat_dot),
    );
    Ok(AdaptRates { theta_hat_dot, rho_dot })
}

/// Labeled decomposition of half the energy rate along the closed loop.
///
/// `term_mismatch` uses the true parameters and exists for diagnostics
/// only; `term_time` is zero for the time-invariant metric families this
/// crate ships.
#[derive(Debug, Clone, Copy)]
pub struct EnergyRateReport {
    pub term_estimated_system: f64,
    pub term_reference_model: f64,
    pub term_mismatch: f64,
    pub term_param_drift: f64,
    pub term_time: f64,
}

impl EnergyRateReport {
    /// Sum of all terms; equals one half of the total energy rate.
    pub fn half_rate(&self) -> f64 {
        self.term_estimated_system
            + self.term_reference_model
            + self.term_mismatch
            + self.term_param_drift
            + self.term_time
    }
}

/// Splits `E_dot / 2` into the estimated-system, reference-model,
/// parameter-mismatch, estimate-drift, and explicit-time contributions,
/// using the exact first variation of the discrete energy. `x_d_dot` is
/// the exact velocity of the reference generator.
#[allow(clippy::too_many_arguments)]
pub fn energy_rate_report(
    model: &SystemModel,
    metric: &MetricFamily,
    geo: &Geodesic,
    x: &DVector<f64>,
    x_d_dot: &DVector<f64>,
    u: &DVector<f64>,
    state: &AdaptState,
    theta_true: &DVector<f64>,
    theta_hat_dot: Option<&DVector<f64>>,
    t: f64,
) -> Result<EnergyRateReport> {
    require_converged(geo)?;
    let (g0, g1) = energy_endpoint_grads(metric, geo, &state.theta_hat, t)?;

    let est = model.nominal(x, t) - model.regressor(x, t).transpose() * &state.theta_hat
        + model.input_matrix(x, t) * u;
    let mismatch_drift = model.regressor(x, t).transpose() * (&state.theta_hat - theta_true);

    let term_param_drift = match theta_hat_dot {
        Some(rate) => 0.5 * energy_param_grad(metric, geo, &state.theta_hat, t)?.dot(rate),
        None => 0.0,
    };

    Ok(EnergyRateReport {
        term_estimated_system: 0.5 * g1.dot(&est),
        term_reference_model: 0.5 * g0.dot(x_d_dot),
        term_mismatch: 0.5 * g1.dot(&mismatch_drift),
        term_param_drift,
        term_time: 0.0,
    })
}
