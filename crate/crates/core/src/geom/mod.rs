//! Contraction-metric machinery: model-parameterized Riemannian metrics,
//! the dual-metric pointwise conditions with a sampled validator, the
//! discrete geodesic solver, Riemannian energy derivatives, the
//! energy-driven adaptation law, and a sampled coefficient-fitting
//! heuristic for polynomial dual metrics.

mod conditions;
mod energy;
mod fit;
mod geodesic;
mod metric;
mod optim;

pub use conditions::{annihilator, check_c1, check_c2, C1Report, C2Report, C1_DEFAULT_TOL, C2_DEFAULT_TOL};
pub use energy::{
    adapt_rhs_uccm, energy_endpoint_grads, energy_param_grad, energy_rate_report, EnergyRateReport,
};
pub use fit::{fit_metric_coeffs, ex2_dual_template, FitOptions, FitPoint};
pub use geodesic::{energy_along, solve_geodesic, Geodesic, GeodesicOptions};
pub use metric::{MetricArtifact, MetricFamily, Monomial, PolynomialMetric};
