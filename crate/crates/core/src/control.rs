//! Certainty-equivalence controllers.
//!
//! Every operation here takes the current parameter estimate, never the
//! true parameters; that separation is the point of the interface.
//!
//! The pointwise min-norm controllers solve the single-constraint QP
//! `min |u - u_ref|^2  s.t.  a + b u <= 0` in closed form: `u = u_ref`
//! when the constraint already holds, otherwise the least-squares shift
//! `u = u_ref - (a + b u_ref) b^T / (b b^T)`.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::geom::{energy_endpoint_grads, Geodesic, MetricFamily};
use crate::lyap::{uclf_value_and_grads, BackstepTerms, BacksteppingVariant, UclfFamily};
use crate::model::{ParameterBox, SystemModel};

/// Controller evaluation result.
#[derive(Debug, Clone)]
pub struct ControlOutput {
    pub u: DVector<f64>,
    /// Whether the min-norm inequality was binding.
    pub constraint_active: bool,
    /// Achieved constraint value `a + b u`; nonpositive by construction.
    pub slack: f64,
}

/// Hand-expanded backstepping feedback for the strict-feedback benchmark,
/// evaluated at the supplied estimate (verbatim form).
pub fn backstepping_control(x: &DVector<f64>, theta_hat: &DVector<f64>) -> f64 {
    backstepping_control_variant(x, theta_hat, BacksteppingVariant::Verbatim)
}

/// Backstepping feedback in either form. The `Derived` form is the one the
/// recursion actually produces: with the matching transform and the true
/// parameters it makes the closed loop satisfy `z_dot = A z` exactly
/// (so `V_dot = -4 V`).
pub fn backstepping_control_variant(
    x: &DVector<f64>,
    theta_hat: &DVector<f64>,
    variant: BacksteppingVariant,
) -> f64 {
    let t = BackstepTerms::eval(x, theta_hat);
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    let (th1, th2) = (theta_hat[0], theta_hat[1]);
    match variant {
        BacksteppingVariant::Verbatim => {
            let wbar = -t.w;
            let a_th = 2.0 * th2 - th1 * t.s; // dA/dx1
            wbar * ((t.a + 2.0) * t.a + a_th * wbar - 2.0 * t.a - 1.0)
                - 2.0
                    * (x1 + x3
                        + 2.0 * (-th2 * x2 * x2 + x2 + 2.0 * x1 - th1 * t.s)
                        + wbar * t.a)
                - x2
                - 2.0 * x1
                + th2 * x1 * x1
                + th1 * t.s
                + x3 * (t.a - 2.0)
        }
        BacksteppingVariant::Derived => {
            let z3 = x3 + 2.0 * t.z2 + t.z1 - t.a * t.w;
            let dalpha2_dx1 = 2.0 * t.a - 1.0 + t.a_x1 * t.w - t.a * (t.a + 2.0);
            let dalpha2_dx2 = t.a - 2.0;
            dalpha2_dx1 * t.w + dalpha2_dx2 * x3 - 2.0 * z3 - t.z2
        }
    }
}

/// Pointwise min-norm controller enforcing the Lyapunov decrement
/// `dV/dx (f - Delta^T theta_hat + B u) <= -Q`, `Q = c V`.
pub fn min_norm_clf(
    model: &SystemModel,
    uclf: &UclfFamily,
    x: &DVector<f64>,
    theta_hat: &DVector<f64>,
    t: f64,
) -> Result<ControlOutput> {
    let eval = uclf_value_and_grads(uclf, x, theta_hat)?;
    let drift = model.nominal(x, t) - model.regressor(x, t).transpose() * theta_hat;
    let a = eval.dv_dx.dot(&drift) + uclf.decrement_rate() * eval.v;
    let b = model.input_matrix(x, t).transpose() * &eval.dv_dx;
    min_norm_shift(a, &b, &DVector::zeros(model.input_dim()), x)
}

/// Pointwise min-norm tracking controller enforcing the energy decrement
/// `E_dot <= -2 lambda E` of the certainty-equivalence loop (estimate-drift
/// and explicit-time terms excluded; the rate-scaling state absorbs them).
///
/// `x_d_dot` is the exact velocity of the reference generator; the
/// reference end of the geodesic moves with it regardless of how the
/// generator's parameters relate to the current estimate, so the
/// u-independent part of the energy rate uses it directly.
#[allow(clippy::too_many_arguments)]
pub fn min_norm_ccm(
    model: &SystemModel,
    metric: &MetricFamily,
    geo: &Geodesic,
    x: &DVector<f64>,
    x_d_dot: &DVector<f64>,
    u_d: &DVector<f64>,
    theta_hat: &DVector<f64>,
    t: f64,
) -> Result<ControlOutput> {
    if !geo.converged() {
        return Err(Error::Precondition(format!(
            "geodesic did not converge (residual {:.3e})",
            geo.residual()
        )));
    }
    let (g0, g1) = energy_endpoint_grads(metric, geo, theta_hat, t)?;
    let est_unforced = model.nominal(x, t) - model.regressor(x, t).transpose() * theta_hat;
    let a = g1.dot(&est_unforced) + g0.dot(x_d_dot) + 2.0 * metric.lambda() * geo.energy();
    let b = model.input_matrix(x, t).transpose() * &g1;
    min_norm_shift(a, &b, u_d, x)
}

/// Closed form of `min |u - u_ref|^2 s.t. a + b.u <= 0`.
fn min_norm_shift(
    a: f64,
    b: &DVector<f64>,
    u_ref: &DVector<f64>,
    x: &DVector<f64>,
) -> Result<ControlOutput> {
    let a_at_ref = a + b.dot(u_ref);
    if a_at_ref <= 0.0 {
        return Ok(ControlOutput {
            u: u_ref.clone(),
            constraint_active: false,
            slack: a_at_ref,
        });
    }
    let bb = b.norm_squared();
    if bb < 1e-24 {
        return Err(Error::Infeasible(format!(
            "decrement violated (a = {a_at_ref:.4e}) with vanishing input gain at x = {:?}",
            x.as_slice()
        )));
    }
    let u = u_ref - b * (a_at_ref / bb);
    let slack = a + b.dot(&u);
    Ok(ControlOutput { u, constraint_active: true, slack })
}

/// Feedback law selection for the regulation loop, by config name:
/// `"backstepping"` (derived form), `"backstepping-verbatim"`, or
/// `"min-norm-clf"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UclfControlLaw {
    Backstepping(BacksteppingVariant),
    MinNorm,
}

impl UclfControlLaw {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "backstepping" => Ok(Self::Backstepping(BacksteppingVariant::Derived)),
            "backstepping-verbatim" => Ok(Self::Backstepping(BacksteppingVariant::Verbatim)),
            "min-norm-clf" => Ok(Self::MinNorm),
            other => Err(Error::config(format!(
                "unknown controller '{other}' (expected 'backstepping', 'backstepping-verbatim', or 'min-norm-clf')"
            ))),
        }
    }

    pub fn control(
        &self,
        model: &SystemModel,
        uclf: &UclfFamily,
        x: &DVector<f64>,
        theta_hat: &DVector<f64>,
        t: f64,
    ) -> Result<ControlOutput> {
        match self {
            Self::Backstepping(variant) => {
                if model.state_dim() != 3 || model.param_dim() != 2 || model.input_dim() != 1 {
                    return Err(Error::config(
                        "backstepping law applies to the 3-state, 2-parameter strict-feedback model",
                    ));
                }
                let u = backstepping_control_variant(x, theta_hat, *variant);
                if !u.is_finite() {
                    return Err(Error::NonFinite { what: "backstepping input".into(), index: 0 });
                }
                Ok(ControlOutput {
                    u: DVector::from_vec(vec![u]),
                    constraint_active: false,
                    slack: 0.0,
                })
            }
            Self::MinNorm => min_norm_clf(model, uclf, x, theta_hat, t),
        }
    }
}

/// Componentwise projection of the estimate rate onto the box: rates that
/// push an at-bound component further outward are zeroed, everything else
/// passes through.
pub fn project_rate(
    theta_hat: &DVector<f64>,
    theta_hat_dot: &DVector<f64>,
    bounds: &ParameterBox,
) -> Result<DVector<f64>> {
    if theta_hat.len() != bounds.dim() || theta_hat_dot.len() != bounds.dim() {
        return Err(Error::config("projection dimensions do not agree"));
    }
    if !bounds.contains(theta_hat, 1e-9) {
        return Err(Error::Invariant(format!(
            "estimate left the parameter box: {:?}",
            theta_hat.as_slice()
        )));
    }
    Ok(DVector::from_fn(theta_hat.len(), |i, _| {
        let outward_high = theta_hat[i] >= bounds.upper[i] && theta_hat_dot[i] > 0.0;
        let outward_low = theta_hat[i] <= bounds.lower[i] && theta_hat_dot[i] < 0.0;
        if outward_high || outward_low {
            0.0
        } else {
            theta_hat_dot[i]
        }
    }))
}
