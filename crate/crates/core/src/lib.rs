//! Universal adaptive control toolkit.
//!
//! Simulation and verification machinery for direct adaptive control of
//! nonlinear systems whose parametric uncertainty lies outside the span of
//! the input matrix. Two certificate routes are provided, sharing one
//! rate-scaled adaptation mechanism:
//!
//! * an explicit route built on a model-parameterized Lyapunov family
//!   `V_theta(x) = 1/2 |z_theta(x)|^2` ([`lyap`]), and
//! * a differential route built on a model-parameterized contraction
//!   metric, its geodesics, and the Riemannian energy ([`geom`]).
//!
//! In both, the estimate moves along the certificate gradient while a
//! scalar rate-scaling state adjusts the effective adaptation gain online
//! so that estimation transients cannot destabilize the closed loop.
//!
//! [`model`] holds the uncertain-dynamics representation and the two
//! built-in benchmark systems, [`control`] the certainty-equivalence
//! feedback laws, [`sim`] the fixed-step closed-loop integration, and
//! [`experiment`] the reproducible experiment presets, certificate
//! validators, and file outputs behind the `uac` command-line runner.

pub mod control;
pub mod error;
pub mod experiment;
pub mod fd;
pub mod geom;
pub mod lyap;
pub mod model;
pub mod sim;

pub use error::{Error, Result};
