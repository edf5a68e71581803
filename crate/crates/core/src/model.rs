//! Uncertain system models.
//!
//! A [`SystemModel`] represents dynamics of the form
//!
//! ```text
//! x_dot = f(x,t) - Delta(x,t)^T theta + B(x,t) u
//! ```
//!
//! where `Delta` is the `p x n` regressor matrix with rows `phi_i` and `B`
//! is the `n x m` input matrix with columns `b_i`. The minus sign in front
//! of the regressor term is owned by [`eval_dynamics`]; model constructors
//! must NOT fold it into `Delta`.
//!
//! Models are immutable after construction and safe to share across
//! simulation workers; every operation here is a pure function of its
//! arguments. Time-varying fields are supported only through the explicit
//! `t` argument.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

type VecField = Box<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
type MatField = Box<dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;

/// Box of admissible parameters, one interval per component.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl ParameterBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::config("parameter box bounds have different lengths"));
        }
        for i in 0..lower.len() {
            if !(lower[i] <= upper[i]) {
                return Err(Error::config(format!(
                    "parameter box component {i} has lower > upper ({} > {})",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn from_intervals(intervals: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            DVector::from_iterator(intervals.len(), intervals.iter().map(|b| b.0)),
            DVector::from_iterator(intervals.len(), intervals.iter().map(|b| b.1)),
        )
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    pub fn contains(&self, theta: &DVector<f64>, tol: f64) -> bool {
        (0..self.dim()).all(|i| theta[i] >= self.lower[i] - tol && theta[i] <= self.upper[i] + tol)
    }

    /// Componentwise clamp onto the box.
    pub fn clamp(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| theta[i].clamp(self.lower[i], self.upper[i]))
    }
}

/// Dynamics model with analytic state Jacobians of every field.
pub struct SystemModel {
    name: String,
    n: usize,
    m: usize,
    p: usize,
    f: VecField,
    regressor: MatField,
    input_matrix: MatField,
    jac_f: MatField,
    jac_phi: Vec<MatField>,
    jac_b: Vec<MatField>,
}

impl SystemModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        n: usize,
        m: usize,
        p: usize,
        f: VecField,
        regressor: MatField,
        input_matrix: MatField,
        jac_f: MatField,
        jac_phi: Vec<MatField>,
        jac_b: Vec<MatField>,
    ) -> Result<Self> {
        if jac_phi.len() != p {
            return Err(Error::config(format!(
                "model '{}' supplies {} regressor Jacobians for p = {}",
                name.into(),
                jac_phi.len(),
                p
            )));
        }
        if jac_b.len() != m {
            return Err(Error::config(format!(
                "model supplies {} input-column Jacobians for m = {}",
                jac_b.len(),
                m
            )));
        }
        Ok(Self {
            name: name.into(),
            n,
            m,
            p,
            f,
            regressor,
            input_matrix,
            jac_f,
            jac_phi,
            jac_b,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn state_dim(&self) -> usize {
        self.n
    }
    pub fn input_dim(&self) -> usize {
        self.m
    }
    pub fn param_dim(&self) -> usize {
        self.p
    }

    pub fn nominal(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.f)(x, t)
    }

    /// Regressor matrix `Delta(x,t)`, `p x n`, rows `phi_i`.
    pub fn regressor(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        (self.regressor)(x, t)
    }

    /// Input matrix `B(x,t)`, `n x m`.
    pub fn input_matrix(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        (self.input_matrix)(x, t)
    }

    pub fn jac_nominal(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        (self.jac_f)(x, t)
    }

    /// Jacobian of the i-th regressor row seen as a vector field,
    /// `d(phi_i^T)/dx`, `n x n`.
    pub fn jac_regressor_row(&self, i: usize, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        (self.jac_phi[i])(x, t)
    }

    /// Jacobian of the i-th input column, `d(b_i)/dx`, `n x n`.
    pub fn jac_input_col(&self, i: usize, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        (self.jac_b[i])(x, t)
    }

    fn check_dims(&self, x: &DVector<f64>, theta: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.n || theta.len() != self.p || u.len() != self.m {
            return Err(Error::config(format!(
                "model '{}' expects (n,p,m) = ({},{},{}), got ({},{},{})",
                self.name,
                self.n,
                self.p,
                self.m,
                x.len(),
                theta.len(),
                u.len()
            )));
        }
        Ok(())
    }
}

/// Evaluates `x_dot = f(x,t) - Delta(x,t)^T theta + B(x,t) u`.
pub fn eval_dynamics(
    model: &SystemModel,
    x: &DVector<f64>,
    theta: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    model.check_dims(x, theta, u)?;
    let out = model.nominal(x, t) - model.regressor(x, t).transpose() * theta
        + model.input_matrix(x, t) * u;
    Error::check_finite("dynamics", out.as_slice())?;
    Ok(out)
}

/// State Jacobian of the closed-loop drift,
/// `A_theta = df/dx - sum_i d(phi_i^T)/dx theta_i + sum_i d(b_i)/dx u_i`.
pub fn closed_loop_jacobian(
    model: &SystemModel,
    x: &DVector<f64>,
    theta: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
) -> Result<DMatrix<f64>> {
    model.check_dims(x, theta, u)?;
    let mut a = model.jac_nominal(x, t);
    for i in 0..model.p {
        a -= model.jac_regressor_row(i, x, t) * theta[i];
    }
    for i in 0..model.m {
        a += model.jac_input_col(i, x, t) * u[i];
    }
    Ok(a)
}

fn zeros3() -> DMatrix<f64> {
    DMatrix::zeros(3, 3)
}

/// Strict-feedback benchmark:
///
/// ```text
/// x1_dot = -theta1 sin(x1) - theta2 x1^2 + x2
/// x2_dot = x3
/// x3_dot = u
/// ```
///
/// encoded with `f = (x2, x3, 0)`, `phi1 = (sin x1, 0, 0)`,
/// `phi2 = (x1^2, 0, 0)`, `B = (0, 0, 1)^T`.
pub fn strict_feedback_model() -> SystemModel {
    SystemModel::new(
        "ex1-strict-feedback",
        3,
        1,
        2,
        Box::new(|x, _| DVector::from_vec(vec![x[1], x[2], 0.0])),
        Box::new(|x, _| {
            DMatrix::from_row_slice(2, 3, &[x[0].sin(), 0.0, 0.0, x[0] * x[0], 0.0, 0.0])
        }),
        Box::new(|_, _| DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0])),
        Box::new(|_, _| DMatrix::from_row_slice(3, 3, &[0., 1., 0., 0., 0., 1., 0., 0., 0.])),
        vec![
            Box::new(|x: &DVector<f64>, _| {
                let mut j = zeros3();
                j[(0, 0)] = x[0].cos();
                j
            }),
            Box::new(|x: &DVector<f64>, _| {
                let mut j = zeros3();
                j[(0, 0)] = 2.0 * x[0];
                j
            }),
        ],
        vec![Box::new(|_: &DVector<f64>, _| zeros3())],
    )
    .expect("builtin model is well-formed")
}

/// Non-feedback-linearizable benchmark:
///
/// ```text
/// x1_dot = x3 - theta1 x1
/// x2_dot = -x2 - theta2 x1^2
/// x3_dot = tanh(x2) - theta3 x3 - theta4 x1^2 + u
/// ```
///
/// encoded with `f = (x3, -x2, tanh x2)`, regressor rows
/// `phi1 = (x1, 0, 0)`, `phi2 = (0, x1^2, 0)`, `phi3 = (0, 0, x3)`,
/// `phi4 = (0, 0, x1^2)`, and `B = (0, 0, 1)^T`. The rows are the unique
/// decomposition consistent with the right-hand side above.
pub fn contracting_model() -> SystemModel {
    SystemModel::new(
        "ex2-contracting",
        3,
        1,
        4,
        Box::new(|x, _| DVector::from_vec(vec![x[2], -x[1], x[1].tanh()])),
        Box::new(|x, _| {
            let x1sq = x[0] * x[0];
            DMatrix::from_row_slice(
                4,
                3,
                &[
                    x[0], 0.0, 0.0, //
                    0.0, x1sq, 0.0, //
                    0.0, 0.0, x[2], //
                    0.0, 0.0, x1sq,
                ],
            )
        }),
        Box::new(|_, _| DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0])),
        Box::new(|x, _| {
            let sech2 = {
                let c = x[1].cosh();
                1.0 / (c * c)
            };
            DMatrix::from_row_slice(3, 3, &[0., 0., 1., 0., -1., 0., 0., sech2, 0.])
        }),
        vec![
            Box::new(|_: &DVector<f64>, _| {
                let mut j = zeros3();
                j[(0, 0)] = 1.0;
                j
            }),
            Box::new(|x: &DVector<f64>, _| {
                let mut j = zeros3();
                j[(1, 0)] = 2.0 * x[0];
                j
            }),
            Box::new(|_: &DVector<f64>, _| {
                let mut j = zeros3();
                j[(2, 2)] = 1.0;
                j
            }),
            Box::new(|x: &DVector<f64>, _| {
                let mut j = zeros3();
                j[(2, 0)] = 2.0 * x[0];
                j
            }),
        ],
        vec![Box::new(|_: &DVector<f64>, _| zeros3())],
    )
    .expect("builtin model is well-formed")
}

/// Looks up a built-in model by its config name.
pub fn builtin_model(name: &str) -> Result<SystemModel> {
    match name {
        "ex1-strict-feedback" => Ok(strict_feedback_model()),
        "ex2-contracting" => Ok(contracting_model()),
        other => Err(Error::config(format!(
            "unknown model '{other}' (expected 'ex1-strict-feedback' or 'ex2-contracting')"
        ))),
    }
}
