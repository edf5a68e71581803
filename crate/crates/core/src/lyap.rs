//! Model-parameterized control Lyapunov machinery.
//!
//! A [`UclfFamily`] packages an explicit state transformation
//! `z_theta(x)` with `V_theta(x) = 1/2 z^T z`, its Jacobians in `x` and
//! `theta`, and an exponential decrement rate `c` so that the certified
//! decrement is `Q_theta(x) = c * V_theta(x)`.
//!
//! The adaptation law couples the parameter estimate with a rate-scaling
//! state `rho` through a strictly increasing, uniformly positive scaling
//! function `upsilon(rho)`:
//!
//! ```text
//! theta_hat_dot = -upsilon(rho) * Gamma * Delta(x,t) * (dV/dx)^T
//! rho_dot       = -(upsilon/upsilon_rho) * 1/(V + eta) * sum_i dV/dtheta_i * theta_hat_dot_i
//! ```
//!
//! The `rho` equation is built so that
//! `upsilon_rho * rho_dot * (V + eta) + upsilon * sum_i dV/dtheta_i * theta_hat_dot_i = 0`
//! holds identically, which is what removes the estimate-transient terms
//! from the composite certificate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::SystemModel;

type TransformFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
type TransformJacFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Family of Lyapunov functions `V_theta(x) = 1/2 |z_theta(x)|^2` indexed by
/// the model parameter vector.
pub struct UclfFamily {
    n: usize,
    p: usize,
    transform: TransformFn,
    jac_x: TransformJacFn,
    jac_theta: TransformJacFn,
    decrement_rate: f64,
}

impl UclfFamily {
    pub fn new(
        n: usize,
        p: usize,
        transform: TransformFn,
        jac_x: TransformJacFn,
        jac_theta: TransformJacFn,
        decrement_rate: f64,
    ) -> Result<Self> {
        if !(decrement_rate > 0.0) || !decrement_rate.is_finite() {
            return Err(Error::config("uclf decrement rate must be positive and finite"));
        }
        Ok(Self {
            n,
            p,
            transform,
            jac_x,
            jac_theta,
            decrement_rate,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }
    pub fn param_dim(&self) -> usize {
        self.p
    }

    /// Exponential rate `c` of the certified decrement `Q = c * V`.
    pub fn decrement_rate(&self) -> f64 {
        self.decrement_rate
    }

    pub fn transform(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        (self.transform)(x, theta)
    }

    /// `dz/dx`, shape `n_z x n`.
    pub fn jac_x(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        (self.jac_x)(x, theta)
    }

    /// `dz/dtheta`, shape `n_z x p`.
    pub fn jac_theta(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        (self.jac_theta)(x, theta)
    }
}

/// Value and gradients of `V_theta` at a point.
#[derive(Debug, Clone)]
pub struct UclfEval {
    pub v: f64,
    /// Gradient in `x` (components of the covector `dV/dx`).
    pub dv_dx: DVector<f64>,
    /// Gradient in `theta`.
    pub dv_dtheta: DVector<f64>,
}

/// Evaluates `V = 1/2 z^T z`, `dV/dx = z^T dz/dx`, `dV/dtheta = z^T dz/dtheta`.
pub fn uclf_value_and_grads(
    uclf: &UclfFamily,
    x: &DVector<f64>,
    theta_hat: &DVector<f64>,
) -> Result<UclfEval> {
    if x.len() != uclf.n || theta_hat.len() != uclf.p {
        return Err(Error::config(format!(
            "uclf expects (n,p) = ({},{}), got ({},{})",
            uclf.n,
            uclf.p,
            x.len(),
            theta_hat.len()
        )));
    }
    let z = uclf.transform(x, theta_hat);
    Error::check_finite("uclf transform", z.as_slice())?;
    let v = 0.5 * z.dot(&z);
    let dv_dx = uclf.jac_x(x, theta_hat).transpose() * &z;
    let dv_dtheta = uclf.jac_theta(x, theta_hat).transpose() * &z;
    Ok(UclfEval { v, dv_dx, dv_dtheta })
}

/// Scaling function `upsilon(rho) = a * exp(rho / c) + b` with
/// `upsilon_rho = (a/c) * exp(rho / c)`.
///
/// `a, b, c > 0` make it strictly increasing and uniformly positive with
/// infimum `b`. Evaluation clamps `rho` to `[-rho_max, rho_max]`, which
/// freezes the scaling at its boundary value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingFunction {
    a: f64,
    b: f64,
    c: f64,
    rho_max: f64,
}

impl ScalingFunction {
    pub const DEFAULT_RHO_MAX: f64 = 500.0;

    pub fn new(a: f64, b: f64, c: f64, rho_max: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && c > 0.0 && rho_max > 0.0)
            || ![a, b, c, rho_max].iter().all(|v| v.is_finite())
        {
            return Err(Error::Invariant(format!(
                "scaling function needs finite a, b, c, rho_max > 0 (got a={a}, b={b}, c={c}, rho_max={rho_max})"
            )));
        }
        Ok(Self { a, b, c, rho_max })
    }

    /// The `0.9 exp(rho/5) + 0.1` scaling used by both experiment presets.
    pub fn standard() -> Self {
        Self::new(0.9, 0.1, 5.0, Self::DEFAULT_RHO_MAX).unwrap()
    }

    /// Uniform lower bound `b` of the scaling.
    pub fn floor(&self) -> f64 {
        self.b
    }

    pub fn rho_max(&self) -> f64 {
        self.rho_max
    }

    /// Returns `(upsilon, upsilon_rho)` at the clamped `rho`.
    pub fn eval(&self, rho: f64) -> (f64, f64) {
        let r = rho.clamp(-self.rho_max, self.rho_max);
        let e = (r / self.c).exp();
        (self.a * e + self.b, self.a / self.c * e)
    }

    pub fn value(&self, rho: f64) -> f64 {
        self.eval(rho).0
    }

    // The rate-scaling ODE in the rho chart is logarithmically stiff: as
    // rho dives, |rho_dot| grows like exp(|rho|/c) while the scaling value
    // itself moves smoothly. Fixed-step integration therefore runs in the
    // chart sigma = exp(rho/c), where the same law reads
    // sigma_dot = -(sigma + b/a) * drift / (cert + eta), a smooth equation
    // on sigma >= 0 (sigma = 0 is the scaling floor, rho = -infinity).

    pub fn sigma_from_rho(&self, rho: f64) -> f64 {
        (rho.clamp(-self.rho_max, self.rho_max) / self.c).exp()
    }

    /// Inverse chart map; the scaling floor (`sigma = 0`) and anything
    /// beyond the clamp map to `-rho_max` / `+rho_max`.
    pub fn rho_from_sigma(&self, sigma: f64) -> f64 {
        if sigma <= 0.0 {
            return -self.rho_max;
        }
        (self.c * sigma.ln()).clamp(-self.rho_max, self.rho_max)
    }

    /// `(upsilon, upsilon_rho)` evaluated in the sigma chart.
    pub fn eval_sigma(&self, sigma: f64) -> (f64, f64) {
        let s = sigma.max(0.0);
        (self.a * s + self.b, self.a / self.c * s)
    }

    /// Rate of `sigma` equivalent to the rate-scaling law:
    /// `sigma_dot = -(sigma + b/a) * drift / (cert + eta)`.
    pub fn sigma_rate_from_drift(&self, sigma: f64, cert: f64, eta: f64, drift: f64) -> f64 {
        -(sigma.max(0.0) + self.b / self.a) * drift / (cert + eta)
    }

    /// Upper clamp of the sigma chart (image of `rho_max`).
    pub fn sigma_max(&self) -> f64 {
        (self.rho_max / self.c).exp()
    }
}

/// Adaptation gains: a symmetric positive-definite matrix and the
/// regularizer `eta > 0` appearing in the rate-scaling denominator.
#[derive(Debug, Clone)]
pub struct AdaptGains {
    gamma: DMatrix<f64>,
    eta: f64,
}

impl AdaptGains {
    pub fn new(gamma: DMatrix<f64>, eta: f64) -> Result<Self> {
        if !gamma.is_square() {
            return Err(Error::config("gain matrix must be square"));
        }
        let sym_err = (&gamma - gamma.transpose()).amax();
        if sym_err > 1e-12 * gamma.amax().max(1.0) {
            return Err(Error::Invariant(format!(
                "gain matrix not symmetric (asymmetry {sym_err:.3e})"
            )));
        }
        let eigs = gamma.clone().symmetric_eigen().eigenvalues;
        let min_eig = eigs.min();
        if !(min_eig > 0.0) {
            return Err(Error::Invariant(format!(
                "gain matrix must be positive definite (min eigenvalue {min_eig:.3e})"
            )));
        }
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::Invariant(format!("eta must be finite and positive (got {eta})")));
        }
        Ok(Self { gamma, eta })
    }

    pub fn diagonal(diag: &[f64], eta: f64) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_row_slice(diag)), eta)
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }
    pub fn eta(&self) -> f64 {
        self.eta
    }
    pub fn dim(&self) -> usize {
        self.gamma.nrows()
    }

    /// `1/2 v^T Gamma^{-1} v` via a Cholesky solve.
    pub fn half_inv_quad(&self, v: &DVector<f64>) -> Result<f64> {
        let chol = self
            .gamma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::config("gain matrix is singular"))?;
        Ok(0.5 * v.dot(&chol.solve(v)))
    }
}

/// Coupled adaptation state: parameter estimate and rate-scaling state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptState {
    pub theta_hat: DVector<f64>,
    pub rho: f64,
}

impl AdaptState {
    pub fn new(theta_hat: DVector<f64>, rho: f64) -> Self {
        Self { theta_hat, rho }
    }
}

/// Right-hand side of the coupled adaptation law.
#[derive(Debug, Clone)]
pub struct AdaptRates {
    pub theta_hat_dot: DVector<f64>,
    pub rho_dot: f64,
}

impl AdaptRates {
    pub fn zero(p: usize) -> Self {
        Self {
            theta_hat_dot: DVector::zeros(p),
            rho_dot: 0.0,
        }
    }
}

/// Adaptation law driven by the Lyapunov certificate.
pub fn adapt_rhs_uclf(
    model: &SystemModel,
    uclf: &UclfFamily,
    scaling: &ScalingFunction,
    gains: &AdaptGains,
    x: &DVector<f64>,
    state: &AdaptState,
    t: f64,
) -> Result<AdaptRates> {
    let eval = uclf_value_and_grads(uclf, x, &state.theta_hat)?;
    let (ups, ups_rho) = scaling.eval(state.rho);
    if !(ups_rho > 0.0) {
        return Err(Error::Invariant(format!(
            "scaling function not strictly increasing at rho = {} (upsilon_rho = {ups_rho})",
            state.rho
        )));
    }
    let delta = model.regressor(x, t);
    let theta_hat_dot = -(gains.gamma() * (delta * &eval.dv_dx)) * ups;
    let rho_dot = rho_rate_from_drift(
        scaling,
        state.rho,
        eval.v,
        gains.eta(),
        eval.dv_dtheta.dot(&theta_hat_dot),
    );
    Ok(AdaptRates { theta_hat_dot, rho_dot })
}

/// `rho_dot = -(upsilon/upsilon_rho) * drift / (cert + eta)` where `drift`
/// is `sum_i dV/dtheta_i * theta_hat_dot_i` (or the energy analogue).
pub(crate) fn rho_rate_from_drift(
    scaling: &ScalingFunction,
    rho: f64,
    cert: f64,
    eta: f64,
    drift: f64,
) -> f64 {
    let (ups, ups_rho) = scaling.eval(rho);
    -(ups / ups_rho) * drift / (cert + eta)
}

/// Composite certificate `upsilon(rho) (V_thetahat(x) + eta) + 1/2 err^T Gamma^{-1} err`
/// with `err = theta_hat - theta_true`. Diagnostic only: it reads the true
/// parameters, which no controller is allowed to do.
pub fn composite_lyapunov(
    uclf: &UclfFamily,
    scaling: &ScalingFunction,
    gains: &AdaptGains,
    x: &DVector<f64>,
    state: &AdaptState,
    theta_true: &DVector<f64>,
) -> Result<f64> {
    let eval = uclf_value_and_grads(uclf, x, &state.theta_hat)?;
    let ups = scaling.value(state.rho);
    let err = &state.theta_hat - theta_true;
    Ok(ups * (eval.v + gains.eta()) + gains.half_inv_quad(&err)?)
}

/// Hand-expanded backstepping quantities shared by the transform and the
/// feedback law for the strict-feedback benchmark.
///
/// `a = theta1 cos x1 + 2 theta2 x1 - 2` is the slope of the first virtual
/// control, `w = x2 - theta1 sin x1 - theta2 x1^2` is the drift of `x1`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BackstepTerms {
    pub s: f64,
    pub c: f64,
    pub a: f64,
    /// da/dx1
    pub a_x1: f64,
    pub w: f64,
    pub z1: f64,
    pub z2: f64,
}

impl BackstepTerms {
    pub fn eval(x: &DVector<f64>, theta: &DVector<f64>) -> Self {
        let (x1, x2) = (x[0], x[1]);
        let (th1, th2) = (theta[0], theta[1]);
        let s = x1.sin();
        let c = x1.cos();
        let a = th1 * c + 2.0 * th2 * x1 - 2.0;
        let a_x1 = -th1 * s + 2.0 * th2;
        let w = x2 - th1 * s - th2 * x1 * x1;
        let z1 = x1;
        let z2 = x2 + 2.0 * x1 - th2 * x1 * x1 - th1 * s;
        Self { s, c, a, a_x1, w, z1, z2 }
    }
}

/// Which closed form of the third backstepping coordinate (and the matching
/// feedback law) to use.
///
/// `Verbatim` keeps the widely circulated hand-expanded expression, which
/// contains two transcription slips in `z3` (an `x2^2` that the recursion
/// produces as `x1^2`, and an inner `x1` that should be `2 x1`).
/// `Derived` re-derives `z3` from the recursion itself so that the closed
/// loop with matching feedback satisfies `z_dot = A z` with
/// `A = [[-2,1,0],[-1,-2,1],[0,-1,-2]]`, i.e. `V_dot = -4 V` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BacksteppingVariant {
    Verbatim,
    Derived,
}

impl BacksteppingVariant {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "verbatim" => Ok(Self::Verbatim),
            "derived" => Ok(Self::Derived),
            other => Err(Error::config(format!(
                "unknown backstepping variant '{other}' (expected 'verbatim' or 'derived')"
            ))),
        }
    }
}

/// The hand-expanded backstepping transformation (verbatim form):
///
/// ```text
/// z1 = x1
/// z2 = x2 + 2 x1 - theta2 x1^2 - theta1 sin x1
/// z3 = x1 + x3 + 2(-theta2 x2^2 + x2 + x1 - theta1 sin x1)
///      + (theta2 x1^2 - x2 + theta1 sin x1)(2 theta2 x1 - 2 + theta1 cos x1)
/// ```
pub fn backstepping_transform(x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
    backstepping_transform_variant(x, theta, BacksteppingVariant::Verbatim)
}

pub fn backstepping_transform_variant(
    x: &DVector<f64>,
    theta: &DVector<f64>,
    variant: BacksteppingVariant,
) -> DVector<f64> {
    let t = BackstepTerms::eval(x, theta);
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    let (th1, th2) = (theta[0], theta[1]);
    let z3 = match variant {
        BacksteppingVariant::Verbatim => {
            let wbar = -t.w; // theta2 x1^2 - x2 + theta1 sin x1
            x1 + x3 + 2.0 * (-th2 * x2 * x2 + x2 + x1 - th1 * t.s) + wbar * t.a
        }
        BacksteppingVariant::Derived => x3 + 2.0 * t.z2 + t.z1 - t.a * t.w,
    };
    DVector::from_vec(vec![t.z1, t.z2, z3])
}

fn backstepping_jac_x(
    x: &DVector<f64>,
    theta: &DVector<f64>,
    variant: BacksteppingVariant,
) -> DMatrix<f64> {
    let t = BackstepTerms::eval(x, theta);
    let x2 = x[1];
    let (th1, th2) = (theta[0], theta[1]);
    let row3 = match variant {
        BacksteppingVariant::Verbatim => {
            let wbar = -t.w;
            [
                3.0 - 2.0 * th1 * t.c + (t.a + 2.0) * t.a + wbar * t.a_x1,
                2.0 - 4.0 * th2 * x2 - t.a,
                1.0,
            ]
        }
        BacksteppingVariant::Derived => [
            1.0 - 2.0 * t.a - t.a_x1 * t.w + t.a * (t.a + 2.0),
            2.0 - t.a,
            1.0,
        ],
    };
    DMatrix::from_row_slice(
        3,
        3,
        &[
            1.0, 0.0, 0.0, //
            -t.a, 1.0, 0.0, //
            row3[0], row3[1], row3[2],
        ],
    )
}

fn backstepping_jac_theta(
    x: &DVector<f64>,
    theta: &DVector<f64>,
    variant: BacksteppingVariant,
) -> DMatrix<f64> {
    let t = BackstepTerms::eval(x, theta);
    let (x1, x2) = (x[0], x[1]);
    let x1sq = x1 * x1;
    let row3 = match variant {
        BacksteppingVariant::Verbatim => {
            let wbar = -t.w;
            [
                -2.0 * t.s + t.s * t.a + wbar * t.c,
                -2.0 * x2 * x2 + x1sq * t.a + 2.0 * x1 * wbar,
            ]
        }
        BacksteppingVariant::Derived => [
            -2.0 * t.s - t.c * t.w + t.a * t.s,
            -2.0 * x1sq - 2.0 * x1 * t.w + t.a * x1sq,
        ],
    };
    DMatrix::from_row_slice(
        3,
        2,
        &[
            0.0, 0.0, //
            -t.s, -x1sq, //
            row3[0], row3[1],
        ],
    )
}

/// Backstepping Lyapunov family for the strict-feedback benchmark, with
/// decrement `Q = 4 V`.
pub fn backstepping_uclf(variant: BacksteppingVariant) -> UclfFamily {
    UclfFamily::new(
        3,
        2,
        Box::new(move |x, th| backstepping_transform_variant(x, th, variant)),
        Box::new(move |x, th| backstepping_jac_x(x, th, variant)),
        Box::new(move |x, th| backstepping_jac_theta(x, th, variant)),
        4.0,
    )
    .expect("builtin uclf is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd;
    use crate::model::{eval_dynamics, strict_feedback_model};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn identity_uclf(n: usize, p: usize) -> UclfFamily {
        UclfFamily::new(
            n,
            p,
            Box::new(|x, _| x.clone()),
            Box::new(move |_, _| DMatrix::identity(n, n)),
            Box::new(move |_, _| DMatrix::zeros(n, p)),
            2.0,
        )
        .unwrap()
    }

    #[test]
    fn scaling_standard_values() {
        let s = ScalingFunction::standard();
        let (v, vr) = s.eval(0.0);
        assert_relative_eq!(v, 1.0, epsilon = 1e-15);
        assert_relative_eq!(vr, 0.18, epsilon = 1e-15);
        assert!(s.value(1.0) > s.value(0.0));
        // asymptote: clamped far-negative rho sits at the floor
        assert_relative_eq!(s.value(-1e9), 0.1, epsilon = 1e-12);
        assert!(s.eval(-1e9).1 > 0.0);
    }

    #[test]
    fn scaling_derivative_matches_finite_differences() {
        let s = ScalingFunction::standard();
        for rho in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let (_, vr) = s.eval(rho);
            let fd_vr = fd::derivative(|r| s.value(r), rho, 1e-6);
            assert_relative_eq!(vr, fd_vr, max_relative = 1e-7);
        }
    }

    #[test]
    fn scaling_rejects_bad_parameters() {
        assert!(ScalingFunction::new(-0.9, 0.1, 5.0, 500.0).is_err());
        assert!(ScalingFunction::new(0.9, 0.0, 5.0, 500.0).is_err());
        assert!(ScalingFunction::new(0.9, 0.1, -5.0, 500.0).is_err());
    }

    #[test]
    fn uclf_eval_zero_and_identity() {
        let f = identity_uclf(2, 1);
        let eval = uclf_value_and_grads(&f, &DVector::zeros(2), &DVector::zeros(1)).unwrap();
        assert_eq!(eval.v, 0.0);
        assert_eq!(eval.dv_dx, DVector::zeros(2));
        assert_eq!(eval.dv_dtheta, DVector::zeros(1));

        let eval =
            uclf_value_and_grads(&f, &DVector::from_vec(vec![1.0, 2.0]), &DVector::zeros(1))
                .unwrap();
        assert_relative_eq!(eval.v, 2.5);
        assert_eq!(eval.dv_dx, DVector::from_vec(vec![1.0, 2.0]));
        assert_eq!(eval.dv_dtheta, DVector::zeros(1));
    }

    #[test]
    fn backstepping_verbatim_point_values() {
        let zero = DVector::zeros(3);
        let th0 = DVector::zeros(2);
        assert_eq!(backstepping_transform(&zero, &th0), DVector::zeros(3));

        let x = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let z = backstepping_transform(&x, &th0);
        assert_relative_eq!(z[0], 1.0);
        assert_relative_eq!(z[1], 2.0);
        assert_relative_eq!(z[2], 3.0);

        let uclf = backstepping_uclf(BacksteppingVariant::Verbatim);
        let eval = uclf_value_and_grads(&uclf, &x, &th0).unwrap();
        assert_relative_eq!(eval.v, 7.0);
    }

    #[test]
    fn backstepping_variants_differ_in_z3_only() {
        let x = DVector::from_vec(vec![0.7, -1.2, 0.4]);
        let th = DVector::from_vec(vec![0.3, 0.5]);
        let zv = backstepping_transform_variant(&x, &th, BacksteppingVariant::Verbatim);
        let zd = backstepping_transform_variant(&x, &th, BacksteppingVariant::Derived);
        assert_eq!(zv[0], zd[0]);
        assert_eq!(zv[1], zd[1]);
        assert_ne!(zv[2], zd[2]);
    }

    #[test]
    fn backstepping_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for variant in [BacksteppingVariant::Verbatim, BacksteppingVariant::Derived] {
            let uclf = backstepping_uclf(variant);
            for _ in 0..100 {
                let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
                let th = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                let jx = uclf.jac_x(&x, &th);
                let jx_fd = fd::jacobian(|xx| uclf.transform(xx, &th), &x, 1e-5);
                assert!(
                    fd::rel_err(&jx, &jx_fd, 1e-3) < 1e-5,
                    "jac_x mismatch ({variant:?}): {:.2e}",
                    fd::rel_err(&jx, &jx_fd, 1e-3)
                );
                let jt = uclf.jac_theta(&x, &th);
                let jt_fd = fd::jacobian(|tt| uclf.transform(&x, tt), &th, 1e-5);
                assert!(
                    fd::rel_err(&jt, &jt_fd, 1e-3) < 1e-5,
                    "jac_theta mismatch ({variant:?}): {:.2e}",
                    fd::rel_err(&jt, &jt_fd, 1e-3)
                );
            }
        }
    }

    #[test]
    fn dv_dtheta_matches_finite_differences_of_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let uclf = backstepping_uclf(BacksteppingVariant::Derived);
        for _ in 0..50 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let th = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let eval = uclf_value_and_grads(&uclf, &x, &th).unwrap();
            let g_fd = fd::gradient(
                |tt| uclf_value_and_grads(&uclf, &x, tt).unwrap().v,
                &th,
                1e-5,
            );
            assert!(fd::rel_err_vec(&eval.dv_dtheta, &g_fd, 1e-3) < 1e-5);
        }
    }

    #[test]
    fn adapt_rhs_zero_regressor_and_equilibrium() {
        let model = strict_feedback_model();
        let uclf = backstepping_uclf(BacksteppingVariant::Derived);
        let scaling = ScalingFunction::standard();
        let gains = AdaptGains::diagonal(&[0.1, 0.1], 100.0).unwrap();

        // at the origin z = 0 so dV/dx = 0 and both rates vanish
        let state = AdaptState::new(DVector::from_vec(vec![0.2, 0.3]), 0.4);
        let rates =
            adapt_rhs_uclf(&model, &uclf, &scaling, &gains, &DVector::zeros(3), &state, 0.0)
                .unwrap();
        assert_eq!(rates.theta_hat_dot, DVector::zeros(2));
        assert_eq!(rates.rho_dot, 0.0);
    }

    #[test]
    fn adapt_rhs_scalar_toy() {
        // n = p = m = 1, Delta = 1, z = x so dV/dx = x; upsilon(0) = 1, Gamma = 1
        let model = SystemModel::new(
            "scalar",
            1,
            1,
            1,
            Box::new(|_, _| DVector::zeros(1)),
            Box::new(|_, _| DMatrix::from_element(1, 1, 1.0)),
            Box::new(|_, _| DMatrix::from_element(1, 1, 1.0)),
            Box::new(|_, _| DMatrix::zeros(1, 1)),
            vec![Box::new(|_: &DVector<f64>, _| DMatrix::zeros(1, 1))],
            vec![Box::new(|_: &DVector<f64>, _| DMatrix::zeros(1, 1))],
        )
        .unwrap();
        let uclf = identity_uclf(1, 1);
        let scaling = ScalingFunction::standard();
        let gains = AdaptGains::diagonal(&[1.0], 1.0).unwrap();
        let state = AdaptState::new(DVector::zeros(1), 0.0);
        let rates = adapt_rhs_uclf(
            &model,
            &uclf,
            &scaling,
            &gains,
            &DVector::from_vec(vec![2.0]),
            &state,
            0.0,
        )
        .unwrap();
        assert_relative_eq!(rates.theta_hat_dot[0], -2.0, epsilon = 1e-14);
    }

    #[test]
    fn rho_rate_cancels_drift_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = strict_feedback_model();
        let uclf = backstepping_uclf(BacksteppingVariant::Derived);
        let scaling = ScalingFunction::standard();
        let gains = AdaptGains::diagonal(&[0.1, 0.1], 100.0).unwrap();
        for _ in 0..500 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let state = AdaptState::new(
                DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
                rng.random_range(-2.0..2.0),
            );
            let rates = adapt_rhs_uclf(&model, &uclf, &scaling, &gains, &x, &state, 0.0).unwrap();
            let eval = uclf_value_and_grads(&uclf, &x, &state.theta_hat).unwrap();
            let (ups, ups_rho) = scaling.eval(state.rho);
            let resid = ups_rho * rates.rho_dot * (eval.v + gains.eta())
                + ups * eval.dv_dtheta.dot(&rates.theta_hat_dot);
            let scale = (ups * eval.dv_dtheta.dot(&rates.theta_hat_dot)).abs().max(1.0);
            assert!(resid.abs() / scale < 1e-10, "cancellation residual {resid:.3e}");
        }
    }

    #[test]
    fn composite_point_values() {
        let uclf = backstepping_uclf(BacksteppingVariant::Derived);
        let scaling = ScalingFunction::standard();

        // estimate equals truth at the origin: V = 0, upsilon(0) = 1, eta = 100
        let gains = AdaptGains::diagonal(&[0.1, 0.1], 100.0).unwrap();
        let th = DVector::from_vec(vec![0.1, 0.4]);
        let state = AdaptState::new(th.clone(), 0.0);
        let vc =
            composite_lyapunov(&uclf, &scaling, &gains, &DVector::zeros(3), &state, &th).unwrap();
        assert_relative_eq!(vc, 100.0, epsilon = 1e-12);

        // zero estimation error leaves only upsilon (V + eta)
        let x = DVector::from_vec(vec![0.5, -0.2, 0.8]);
        let state = AdaptState::new(th.clone(), 1.3);
        let vc = composite_lyapunov(&uclf, &scaling, &gains, &x, &state, &th).unwrap();
        let v = uclf_value_and_grads(&uclf, &x, &th).unwrap().v;
        assert_relative_eq!(vc, scaling.value(1.3) * (v + 100.0), epsilon = 1e-12);

        // identity gains, unit error in both components, V = 0, eta = 0.1
        let gains = AdaptGains::diagonal(&[1.0, 1.0], 0.1).unwrap();
        let state = AdaptState::new(DVector::from_vec(vec![1.0, 1.0]), 0.0);
        let vc = composite_lyapunov(
            &uclf,
            &scaling,
            &gains,
            &DVector::zeros(3),
            &state,
            &DVector::zeros(2),
        )
        .unwrap();
        assert_relative_eq!(vc, 1.1, epsilon = 1e-12);
    }

    /// The analytic assembly of the composite rate must match its reduced
    /// certainty-equivalence form, i.e. both cancellations are exact.
    #[test]
    fn composite_rate_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let model = strict_feedback_model();
        let uclf = backstepping_uclf(BacksteppingVariant::Derived);
        let scaling = ScalingFunction::standard();
        let gains = AdaptGains::diagonal(&[0.1, 0.1], 100.0).unwrap();
        for _ in 0..200 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let theta_true = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let state = AdaptState::new(
                DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
                rng.random_range(-1.0..1.0),
            );
            let u = DVector::from_vec(vec![rng.random_range(-3.0..3.0)]);

            let eval = uclf_value_and_grads(&uclf, &x, &state.theta_hat).unwrap();
            let rates = adapt_rhs_uclf(&model, &uclf, &scaling, &gains, &x, &state, 0.0).unwrap();
            let (ups, ups_rho) = scaling.eval(state.rho);
            let x_dot = eval_dynamics(&model, &x, &theta_true, &u, 0.0).unwrap();

            // full chain-rule assembly
            let v_dot = eval.dv_dx.dot(&x_dot) + eval.dv_dtheta.dot(&rates.theta_hat_dot);
            let err = &state.theta_hat - &theta_true;
            let gamma_inv_term = {
                let chol = gains.gamma().clone().cholesky().unwrap();
                err.dot(&chol.solve(&rates.theta_hat_dot))
            };
            let vc_dot_full =
                ups * v_dot + rates.rho_dot * ups_rho * (eval.v + gains.eta()) + gamma_inv_term;

            // reduced certainty-equivalence form
            let delta = model.regressor(&x, 0.0);
            let est_drift = model.nominal(&x, 0.0) - delta.transpose() * &state.theta_hat
                + model.input_matrix(&x, 0.0) * &u;
            let vc_dot_reduced = ups * eval.dv_dx.dot(&est_drift);

            let scale = vc_dot_full.abs().max(vc_dot_reduced.abs()).max(1.0);
            assert!(
                (vc_dot_full - vc_dot_reduced).abs() / scale < 1e-8,
                "composite rate identity violated: {vc_dot_full:.6e} vs {vc_dot_reduced:.6e}"
            );
        }
    }

    /// The sigma chart carries the same law: `a * sigma_dot` must equal
    /// `upsilon_rho * rho_dot` at corresponding states.
    #[test]
    fn sigma_chart_is_consistent_with_rho_rate() {
        let s = ScalingFunction::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        for _ in 0..200 {
            let rho = rng.random_range(-30.0..10.0);
            let cert = rng.random_range(0.0..50.0);
            let eta = rng.random_range(0.1..100.0);
            let drift = rng.random_range(-20.0..20.0);
            let sigma = s.sigma_from_rho(rho);
            let (_, ups_rho) = s.eval(rho);
            let rho_dot = rho_rate_from_drift(&s, rho, cert, eta, drift);
            let sigma_dot = s.sigma_rate_from_drift(sigma, cert, eta, drift);
            let lhs = 0.9 * sigma_dot;
            let rhs = ups_rho * rho_dot;
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-12),
                "chart mismatch at rho={rho}: {lhs} vs {rhs}"
            );
            // both charts agree on the scaling value
            let (v1, _) = s.eval(rho);
            let (v2, _) = s.eval_sigma(sigma);
            assert_relative_eq!(v1, v2, max_relative = 1e-12);
        }
    }

    #[test]
    fn gains_validation() {
        assert!(AdaptGains::diagonal(&[0.1, -0.1], 1.0).is_err());
        assert!(AdaptGains::diagonal(&[0.1, 0.1], 0.0).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(AdaptGains::new(asym, 1.0).is_err());
    }
}
