//! Fixed-step closed-loop simulation.
//!
//! The plant, the estimate, the rate-scaling state, and (for tracking) the
//! reference integrator advance together in one stacked fixed-step
//! integration per control step. The feedback input and, in the tracking
//! loop, the geodesic are held over the step at their start-of-step values;
//! the adaptation right-hand side is re-evaluated at every integrator stage
//! against those held quantities.

use nalgebra::DVector;
use serde::Serialize;

use crate::control::{min_norm_ccm, project_rate, ControlOutput, UclfControlLaw};
use crate::error::{Error, Result};
use crate::geom::{
    energy_along, energy_param_grad, solve_geodesic, Geodesic, GeodesicOptions, MetricFamily,
};
use crate::lyap::{
    composite_lyapunov, uclf_value_and_grads, AdaptGains, AdaptState, ScalingFunction, UclfFamily,
};
use crate::model::{eval_dynamics, ParameterBox, SystemModel};

/// State norm beyond which a trial is recorded as diverged.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Rk4,
    Euler,
}

impl Integrator {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "rk4" => Ok(Self::Rk4),
            "euler" => Ok(Self::Euler),
            other => Err(Error::config(format!(
                "unknown integrator '{other}' (expected 'rk4' or 'euler')"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub dt: f64,
    pub t_final: f64,
    pub integrator: Integrator,
    /// Steps per logged sample.
    pub log_stride: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config("dt must be positive and finite"));
        }
        if self.t_final < self.dt {
            return Err(Error::config("t_final must be at least dt"));
        }
        if self.log_stride == 0 {
            return Err(Error::config("log_stride must be at least 1"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }
}

/// Adaptation switches for a simulation: the law can be frozen entirely
/// (the fixed-estimate baseline) and the estimate can be confined to a box.
#[derive(Debug, Clone, Default)]
pub struct AdaptOptions {
    pub enabled: bool,
    pub projection: Option<ParameterBox>,
}

impl AdaptOptions {
    pub fn enabled() -> Self {
        Self { enabled: true, projection: None }
    }

    pub fn frozen() -> Self {
        Self { enabled: false, projection: None }
    }

    pub fn with_projection(bounds: ParameterBox) -> Self {
        Self { enabled: true, projection: Some(bounds) }
    }
}

/// Classical fixed-step fourth-order step of `state_dot = field(state, t)`.
pub fn rk4_step<F>(field: F, state: &DVector<f64>, t: f64, dt: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>, f64) -> Result<DVector<f64>>,
{
    if !(dt > 0.0) {
        return Err(Error::config("rk4 step size must be positive"));
    }
    let guard = |v: DVector<f64>| -> Result<DVector<f64>> {
        if v.iter().all(|c| c.is_finite()) {
            Ok(v)
        } else {
            Err(Error::Divergence { t, norm: state.norm() })
        }
    };
    let k1 = guard(field(state, t)?)?;
    let k2 = guard(field(&(state + &k1 * (0.5 * dt)), t + 0.5 * dt)?)?;
    let k3 = guard(field(&(state + &k2 * (0.5 * dt)), t + 0.5 * dt)?)?;
    let k4 = guard(field(&(state + &k3 * dt), t + dt)?)?;
    guard(state + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Forward Euler step with the same divergence guard as [`rk4_step`].
pub fn euler_step<F>(field: F, state: &DVector<f64>, t: f64, dt: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>, f64) -> Result<DVector<f64>>,
{
    if !(dt > 0.0) {
        return Err(Error::config("euler step size must be positive"));
    }
    let k = field(state, t)?;
    let out = state + k * dt;
    if out.iter().all(|c| c.is_finite()) {
        Ok(out)
    } else {
        Err(Error::Divergence { t, norm: state.norm() })
    }
}

fn step_state<F>(
    integrator: Integrator,
    field: F,
    state: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>, f64) -> Result<DVector<f64>>,
{
    match integrator {
        Integrator::Rk4 => rk4_step(field, state, t, dt),
        Integrator::Euler => euler_step(field, state, t, dt),
    }
}

/// Time series of one simulated trial.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryLog {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub estimates: Vec<DVector<f64>>,
    pub rho: Vec<f64>,
    pub upsilon: Vec<f64>,
    pub inputs: Vec<DVector<f64>>,
    /// Certificate value along the trial: `V` for the Lyapunov loop, the
    /// Riemannian energy for the tracking loop.
    pub certificate: Vec<f64>,
    /// Composite certificate (uses the true parameters; diagnostic only).
    pub composite: Vec<f64>,
    pub reference_states: Vec<DVector<f64>>,
    pub reference_inputs: Vec<DVector<f64>>,
    pub constraint_active: Vec<bool>,
    /// Geodesic optimality residual per logged step; empty for the
    /// Lyapunov loop.
    pub geodesic_residual: Vec<f64>,
    pub diverged: bool,
    pub rho_clamp_events: usize,
    pub box_clamp_events: usize,
    pub geodesic_failures: usize,
}

/// Per-trial summary for the batch reports.
#[derive(Debug, Clone, Serialize)]
pub struct TrialSummary {
    pub final_state_norm: f64,
    pub final_certificate: f64,
    pub final_tracking_error: f64,
    pub upsilon_min: f64,
    pub upsilon_max: f64,
    pub converged: bool,
    pub diverged: bool,
    pub rho_clamp_events: usize,
    pub box_clamp_events: usize,
    pub geodesic_failures: usize,
    pub logged_steps: usize,
}

impl TrajectoryLog {
    fn push_row(
        &mut self,
        t: f64,
        x: &DVector<f64>,
        state: &AdaptState,
        upsilon: f64,
        u: &DVector<f64>,
        cert: f64,
        composite: f64,
        x_d: &DVector<f64>,
        u_d: &DVector<f64>,
        active: bool,
        geo_residual: Option<f64>,
    ) {
        self.times.push(t);
        self.states.push(x.clone());
        self.estimates.push(state.theta_hat.clone());
        self.rho.push(state.rho);
        self.upsilon.push(upsilon);
        self.inputs.push(u.clone());
        self.certificate.push(cert);
        self.composite.push(composite);
        self.reference_states.push(x_d.clone());
        self.reference_inputs.push(u_d.clone());
        self.constraint_active.push(active);
        if let Some(r) = geo_residual {
            self.geodesic_residual.push(r);
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// One row per logged step; the header names every series.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write;
        let n = self.states.first().map_or(0, |v| v.len());
        let p = self.estimates.first().map_or(0, |v| v.len());
        let m = self.inputs.first().map_or(0, |v| v.len());
        let with_geo = !self.geodesic_residual.is_empty();

        let mut s = String::new();
        let mut header: Vec<String> = vec!["t".into()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=p).map(|i| format!("theta_hat{i}")));
        header.push("rho".into());
        header.push("upsilon".into());
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.push("certificate".into());
        header.push("composite".into());
        header.extend((1..=n).map(|i| format!("xd{i}")));
        header.extend((1..=m).map(|i| format!("ud{i}")));
        header.push("constraint_active".into());
        if with_geo {
            header.push("geodesic_residual".into());
        }
        let _ = writeln!(s, "{}", header.join(","));

        for k in 0..self.len() {
            let mut row: Vec<String> = vec![fmt_f64(self.times[k])];
            row.extend(self.states[k].iter().map(|v| fmt_f64(*v)));
            row.extend(self.estimates[k].iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(self.rho[k]));
            row.push(fmt_f64(self.upsilon[k]));
            row.extend(self.inputs[k].iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(self.certificate[k]));
            row.push(fmt_f64(self.composite[k]));
            row.extend(self.reference_states[k].iter().map(|v| fmt_f64(*v)));
            row.extend(self.reference_inputs[k].iter().map(|v| fmt_f64(*v)));
            row.push(if self.constraint_active[k] { "1".into() } else { "0".into() });
            if with_geo {
                row.push(fmt_f64(self.geodesic_residual[k]));
            }
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    pub fn summary(&self, convergence_threshold: f64) -> TrialSummary {
        let last = self.len().saturating_sub(1);
        let final_state_norm = self.states.get(last).map_or(f64::NAN, |x| x.norm());
        let final_tracking_error = match (self.states.get(last), self.reference_states.get(last)) {
            (Some(x), Some(xd)) => (x - xd).norm(),
            _ => f64::NAN,
        };
        TrialSummary {
            final_state_norm,
            final_certificate: *self.certificate.get(last).unwrap_or(&f64::NAN),
            final_tracking_error,
            upsilon_min: self.upsilon.iter().copied().fold(f64::INFINITY, f64::min),
            upsilon_max: self.upsilon.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            converged: !self.diverged && final_state_norm < convergence_threshold,
            diverged: self.diverged,
            rho_clamp_events: self.rho_clamp_events,
            box_clamp_events: self.box_clamp_events,
            geodesic_failures: self.geodesic_failures,
            logged_steps: self.len(),
        }
    }
}

/// Shortest round-trip float formatting (deterministic for identical runs).
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Post-step clamping of the adaptation state. The rate-scaling chart is
/// clamped to `[0, sigma_max]`; the lower end is the scaling floor
/// (`upsilon = b`), the upper end freezes the scaling at its `rho_max`
/// value. The estimate is clamped onto the projection box to absorb
/// integrator overshoot.
fn clamp_adapt_state(
    theta_hat: &mut DVector<f64>,
    sigma: &mut f64,
    scaling: &ScalingFunction,
    projection: Option<&ParameterBox>,
    rho_events: &mut usize,
    box_events: &mut usize,
) {
    if *sigma < 0.0 || *sigma > scaling.sigma_max() {
        if *rho_events == 0 {
            log::warn!(
                "rate-scaling state clamped at |rho| = {} (scaling frozen at its boundary value)",
                scaling.rho_max()
            );
        }
        *sigma = sigma.clamp(0.0, scaling.sigma_max());
        *rho_events += 1;
    }
    if let Some(bounds) = projection {
        let clamped = bounds.clamp(theta_hat);
        if (&clamped - &*theta_hat).amax() > 0.0 {
            *box_events += 1;
            log::debug!("estimate clamped back onto the parameter box after integration");
        }
        *theta_hat = clamped;
    }
}

/// Regulation loop: plant driven by a Lyapunov-certified law at the current
/// estimate, estimate and rate scaling driven by the certificate gradients.
/// The regulation target is the origin.
#[allow(clippy::too_many_arguments)]
pub fn simulate_uclf(
    model: &SystemModel,
    uclf: &UclfFamily,
    scaling: &ScalingFunction,
    gains: &AdaptGains,
    law: &UclfControlLaw,
    x0: &DVector<f64>,
    theta_true: &DVector<f64>,
    adapt0: &AdaptState,
    sim: &SimConfig,
    adapt: &AdaptOptions,
) -> Result<TrajectoryLog> {
    sim.validate()?;
    let (n, p) = (model.state_dim(), model.param_dim());
    if x0.len() != n || theta_true.len() != p || adapt0.theta_hat.len() != p {
        return Err(Error::config("simulation initial conditions have wrong dimensions"));
    }
    if let Some(b) = &adapt.projection {
        if !b.contains(&adapt0.theta_hat, 1e-9) {
            return Err(Error::config("initial estimate lies outside the projection box"));
        }
    }

    let steps = sim.steps();
    let mut log = TrajectoryLog::default();
    let zero_ref = DVector::zeros(n);
    let zero_ud = DVector::zeros(model.input_dim());

    let mut x = x0.clone();
    let mut theta_hat = adapt0.theta_hat.clone();
    let mut sigma = scaling.sigma_from_rho(adapt0.rho);

    for step in 0..=steps {
        let t = step as f64 * sim.dt;
        if !x.iter().all(|v| v.is_finite()) || x.norm() > DIVERGENCE_NORM {
            log.diverged = true;
            break;
        }
        let rho = scaling.rho_from_sigma(sigma);
        let state = AdaptState::new(theta_hat.clone(), rho);
        // a non-finite feedback evaluation means the closed loop escaped
        // (huge state or estimate): record divergence, don't crash
        let out = match law.control(model, uclf, &x, &theta_hat, t) {
            Ok(o) => o,
            Err(Error::NonFinite { .. }) | Err(Error::Divergence { .. }) => {
                log.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let eval = match uclf_value_and_grads(uclf, &x, &theta_hat) {
            Ok(e) => e,
            Err(Error::NonFinite { .. }) => {
                log.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let vc = match composite_lyapunov(uclf, scaling, gains, &x, &state, theta_true) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                log.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };

        if step % sim.log_stride == 0 || step == steps {
            log.push_row(
                t,
                &x,
                &state,
                scaling.eval_sigma(sigma).0,
                &out.u,
                eval.v,
                vc,
                &zero_ref,
                &zero_ud,
                out.constraint_active,
                None,
            );
        }
        if step == steps {
            break;
        }

        let u_held = out.u.clone();
        let field = |y: &DVector<f64>, tau: f64| -> Result<DVector<f64>> {
            let xs = y.rows(0, n).into_owned();
            let ths = y.rows(n, p).into_owned();
            let ss = y[n + p];
            let x_dot = eval_dynamics(model, &xs, theta_true, &u_held, tau)?;
            let (th_dot, sigma_dot) = if adapt.enabled {
                let ev = uclf_value_and_grads(uclf, &xs, &ths)?;
                let (ups, _) = scaling.eval_sigma(ss);
                let mut td = -(gains.gamma() * (model.regressor(&xs, tau) * &ev.dv_dx)) * ups;
                if let Some(bounds) = &adapt.projection {
                    td = project_rate(&bounds.clamp(&ths), &td, bounds)?;
                }
                let sd = scaling.sigma_rate_from_drift(
                    ss,
                    ev.v,
                    gains.eta(),
                    ev.dv_dtheta.dot(&td),
                );
                (td, sd)
            } else {
                (DVector::zeros(p), 0.0)
            };
            let mut dy = DVector::zeros(n + p + 1);
            dy.rows_mut(0, n).copy_from(&x_dot);
            dy.rows_mut(n, p).copy_from(&th_dot);
            dy[n + p] = sigma_dot;
            Ok(dy)
        };

        let mut y = DVector::zeros(n + p + 1);
        y.rows_mut(0, n).copy_from(&x);
        y.rows_mut(n, p).copy_from(&theta_hat);
        y[n + p] = sigma;
        match step_state(sim.integrator, field, &y, t, sim.dt) {
            Ok(y_new) => {
                x = y_new.rows(0, n).into_owned();
                theta_hat = y_new.rows(n, p).into_owned();
                sigma = y_new[n + p];
            }
            Err(Error::Divergence { .. }) | Err(Error::NonFinite { .. }) => {
                log.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        clamp_adapt_state(
            &mut theta_hat,
            &mut sigma,
            scaling,
            adapt.projection.as_ref(),
            &mut log.rho_clamp_events,
            &mut log.box_clamp_events,
        );
    }
    Ok(log)
}

/// Reference generator mode: regenerate the desired trajectory with the
/// live estimate, or freeze the generator parameters at their initial
/// values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceMode {
    Adaptive,
    Static,
}

/// One evaluation of the sine-driven reference generator.
#[derive(Debug, Clone)]
pub struct RefPoint {
    pub x_d: DVector<f64>,
    pub x_d_dot: DVector<f64>,
    pub u_d: DVector<f64>,
    /// Rate of the internal reference integrator (the second coordinate).
    pub internal_rate: f64,
}

/// Sine-driven reference for the contracting benchmark, consistent with the
/// generator parameters `(theta_ref_1, theta_ref_2, 0, 0)`:
///
/// ```text
/// x1d = sin t
/// x3d = cos t + theta_ref_1 sin t        (inverts the first dynamics row)
/// x2d: internal state with x2d_dot = -x2d - theta_ref_2 sin^2 t
/// u_d = -sin t + theta_ref_1 cos t - tanh(x2d)
/// ```
///
/// The estimate is held frozen inside a control step, so no estimate-rate
/// feedthrough appears in `u_d`.
pub fn reference_ex2(theta_ref: &DVector<f64>, t: f64, x2d: f64) -> RefPoint {
    let (th1, th2) = (theta_ref[0], theta_ref[1]);
    let (s, c) = t.sin_cos();
    let x1d = s;
    let x3d = c + th1 * s;
    let x2d_dot = -x2d - th2 * s * s;
    let x3d_dot = -s + th1 * c;
    let u_d = x3d_dot - x2d.tanh();
    RefPoint {
        x_d: DVector::from_vec(vec![x1d, x2d, x3d]),
        x_d_dot: DVector::from_vec(vec![c, x2d_dot, x3d_dot]),
        u_d: DVector::from_vec(vec![u_d]),
        internal_rate: x2d_dot,
    }
}

/// Behavior when a per-step geodesic solve does not converge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeodesicFailurePolicy {
    /// Keep the best-effort curve, count the event, continue (default).
    AcceptLogged,
    /// Abort the trial with an error.
    Abort,
}

#[derive(Debug, Clone)]
pub struct UccmSimOptions {
    pub geodesic: GeodesicOptions,
    pub failure_policy: GeodesicFailurePolicy,
    pub reference_mode: ReferenceMode,
    /// Initial internal reference state (second reference coordinate).
    pub x2d0: f64,
}

impl Default for UccmSimOptions {
    fn default() -> Self {
        Self {
            geodesic: GeodesicOptions::default(),
            failure_policy: GeodesicFailurePolicy::AcceptLogged,
            reference_mode: ReferenceMode::Adaptive,
            x2d0: 0.0,
        }
    }
}

/// Tracking loop: per step, regenerate the reference, re-solve the geodesic
/// (warm-started), apply the min-norm tracking law, and advance the stacked
/// plant/estimate/rate-scaling/reference state.
#[allow(clippy::too_many_arguments)]
pub fn simulate_uccm(
    model: &SystemModel,
    metric: &MetricFamily,
    scaling: &ScalingFunction,
    gains: &AdaptGains,
    x0: &DVector<f64>,
    theta_true: &DVector<f64>,
    adapt0: &AdaptState,
    sim: &SimConfig,
    adapt: &AdaptOptions,
    opts: &UccmSimOptions,
) -> Result<TrajectoryLog> {
    sim.validate()?;
    let (n, p) = (model.state_dim(), model.param_dim());
    if x0.len() != n || theta_true.len() != p || adapt0.theta_hat.len() != p {
        return Err(Error::config("simulation initial conditions have wrong dimensions"));
    }
    if let Some(b) = &adapt.projection {
        if !b.contains(&adapt0.theta_hat, 1e-9) {
            return Err(Error::config("initial estimate lies outside the projection box"));
        }
    }

    let steps = sim.steps();
    let mut log = TrajectoryLog::default();

    let mut x = x0.clone();
    let mut theta_hat = adapt0.theta_hat.clone();
    let mut sigma = scaling.sigma_from_rho(adapt0.rho);
    let mut x2d = opts.x2d0;
    let theta_ref0 = adapt0.theta_hat.clone();
    let mut warm: Option<Geodesic> = None;

    for step in 0..=steps {
        let t = step as f64 * sim.dt;
        if !x.iter().all(|v| v.is_finite()) || x.norm() > DIVERGENCE_NORM {
            log.diverged = true;
            break;
        }
        let theta_ref = match opts.reference_mode {
            ReferenceMode::Adaptive => theta_hat.clone(),
            ReferenceMode::Static => theta_ref0.clone(),
        };
        let rp = reference_ex2(&theta_ref, t, x2d);

        let geo = {
            let solved =
                solve_geodesic(metric, &theta_hat, &rp.x_d, &x, t, warm.as_ref(), &opts.geodesic)?;
            if solved.converged() {
                solved
            } else {
                match opts.failure_policy {
                    GeodesicFailurePolicy::AcceptLogged => {
                        log.geodesic_failures += 1;
                        log::debug!(
                            "geodesic solve unconverged at t = {t} (residual {:.3e}); keeping best effort",
                            solved.residual()
                        );
                        solved.accept_best_effort()
                    }
                    GeodesicFailurePolicy::Abort => {
                        return Err(Error::Precondition(format!(
                            "geodesic solve failed to converge at t = {t}"
                        )))
                    }
                }
            }
        };

        let out: ControlOutput =
            min_norm_ccm(model, metric, &geo, &x, &rp.x_d_dot, &rp.u_d, &theta_hat, t)?;

        let rho = scaling.rho_from_sigma(sigma);
        let state = AdaptState::new(theta_hat.clone(), rho);
        let energy = geo.energy();
        let err = &theta_hat - theta_true;
        let ups_now = scaling.eval_sigma(sigma).0;
        let vc = ups_now * (energy + gains.eta()) + gains.half_inv_quad(&err)?;

        if step % sim.log_stride == 0 || step == steps {
            log.push_row(
                t,
                &x,
                &state,
                ups_now,
                &out.u,
                energy,
                vc,
                &rp.x_d,
                &rp.u_d,
                out.constraint_active,
                Some(geo.residual()),
            );
        }
        if step == steps {
            break;
        }

        let u_held = out.u.clone();
        let end_speed_held = geo.end_speed().clone();
        let geo_held = &geo;
        let field = |y: &DVector<f64>, tau: f64| -> Result<DVector<f64>> {
            let xs = y.rows(0, n).into_owned();
            let ths = y.rows(n, p).into_owned();
            let ss = y[n + p];
            let x2ds = y[n + p + 1];
            let x_dot = eval_dynamics(model, &xs, theta_true, &u_held, tau)?;
            let (th_dot, sigma_dot) = if adapt.enabled {
                let (ups, _) = scaling.eval_sigma(ss);
                let m_end = metric.metric_at(&xs, &ths, tau)?;
                let mut td = -(gains.gamma()
                    * (model.regressor(&xs, tau) * (m_end * &end_speed_held)))
                    * ups;
                if let Some(bounds) = &adapt.projection {
                    td = project_rate(&bounds.clamp(&ths), &td, bounds)?;
                }
                let e_here = energy_along(metric, geo_held, &ths, tau)?;
                let de = energy_param_grad(metric, geo_held, &ths, tau)?;
                let sd =
                    scaling.sigma_rate_from_drift(ss, e_here, gains.eta(), de.dot(&td));
                (td, sd)
            } else {
                (DVector::zeros(p), 0.0)
            };
            let ref_theta2 = match opts.reference_mode {
                ReferenceMode::Adaptive => ths[1],
                ReferenceMode::Static => theta_ref0[1],
            };
            let s_tau = tau.sin();
            let x2d_dot = -x2ds - ref_theta2 * s_tau * s_tau;
            let mut dy = DVector::zeros(n + p + 2);
            dy.rows_mut(0, n).copy_from(&x_dot);
            dy.rows_mut(n, p).copy_from(&th_dot);
            dy[n + p] = sigma_dot;
            dy[n + p + 1] = x2d_dot;
            Ok(dy)
        };

        let mut y = DVector::zeros(n + p + 2);
        y.rows_mut(0, n).copy_from(&x);
        y.rows_mut(n, p).copy_from(&theta_hat);
        y[n + p] = sigma;
        y[n + p + 1] = x2d;
        match step_state(sim.integrator, field, &y, t, sim.dt) {
            Ok(y_new) => {
                x = y_new.rows(0, n).into_owned();
                theta_hat = y_new.rows(n, p).into_owned();
                sigma = y_new[n + p];
                x2d = y_new[n + p + 1];
            }
            Err(Error::Divergence { .. }) | Err(Error::NonFinite { .. }) => {
                log.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        clamp_adapt_state(
            &mut theta_hat,
            &mut sigma,
            scaling,
            adapt.projection.as_ref(),
            &mut log.rho_clamp_events,
            &mut log.box_clamp_events,
        );
        warm = Some(geo);
    }
    Ok(log)
}
