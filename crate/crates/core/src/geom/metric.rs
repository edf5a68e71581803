//! Model-parameterized Riemannian metrics and their polynomial dual form.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

type MetricFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> Result<DMatrix<f64>> + Send + Sync>;
type MetricBundleFn = Box<
    dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)>
        + Send
        + Sync,
>;

/// A family of symmetric positive-definite metrics `M(x, theta, t)` with
/// analytic partial derivatives in every state and parameter coordinate.
///
/// `bounds = (m_lo, m_hi)` are the uniform eigenvalue bounds claimed for
/// `M` on the working domain; the sampled validator re-checks them.
///
/// The solver-facing accessors return the metric together with all its
/// partials in one call; families that derive the metric from a stored
/// dual (one inversion) supply bundled closures so the inversion is not
/// repeated per coordinate.
pub struct MetricFamily {
    n: usize,
    p: usize,
    lambda: f64,
    bounds: (f64, f64),
    metric: MetricFn,
    d_dx: Vec<MetricFn>,
    d_dtheta: Vec<MetricFn>,
    bundle_x: Option<MetricBundleFn>,
    bundle_theta: Option<MetricBundleFn>,
}

impl MetricFamily {
    pub fn from_closures(
        n: usize,
        p: usize,
        lambda: f64,
        bounds: (f64, f64),
        metric: MetricFn,
        d_dx: Vec<MetricFn>,
        d_dtheta: Vec<MetricFn>,
    ) -> Result<Self> {
        if d_dx.len() != n || d_dtheta.len() != p {
            return Err(Error::config(
                "metric family needs one x-partial per state and one theta-partial per parameter",
            ));
        }
        if !(lambda > 0.0) {
            return Err(Error::config("contraction rate lambda must be positive"));
        }
        if !(bounds.0 > 0.0 && bounds.1 >= bounds.0) {
            return Err(Error::config("metric bounds must satisfy 0 < m_lo <= m_hi"));
        }
        Ok(Self {
            n,
            p,
            lambda,
            bounds,
            metric,
            d_dx,
            d_dtheta,
            bundle_x: None,
            bundle_theta: None,
        })
    }

    /// Constant metric, useful for tests and as a fitting baseline.
    pub fn constant(m: DMatrix<f64>, p: usize, lambda: f64) -> Result<Self> {
        let n = m.nrows();
        if !m.is_square() {
            return Err(Error::config("constant metric must be square"));
        }
        let eigs = m.clone().symmetric_eigen().eigenvalues;
        let (lo, hi) = (eigs.min(), eigs.max());
        if !(lo > 0.0) {
            return Err(Error::Degenerate(format!(
                "constant metric not positive definite (min eigenvalue {lo:.3e})"
            )));
        }
        let zero = move || -> MetricFn { Box::new(move |_, _, _| Ok(DMatrix::zeros(n, n))) };
        Self::from_closures(
            n,
            p,
            lambda,
            (lo, hi),
            Box::new(move |_, _, _| Ok(m.clone())),
            (0..n).map(|_| zero()).collect(),
            (0..p).map(|_| zero()).collect(),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }
    pub fn param_dim(&self) -> usize {
        self.p
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    /// `M(x, theta, t)`.
    pub fn metric_at(&self, x: &DVector<f64>, theta: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        (self.metric)(x, theta, t)
    }

    /// Dual metric `W = M^{-1}` via Cholesky.
    pub fn dual_at(&self, x: &DVector<f64>, theta: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        let m = self.metric_at(x, theta, t)?;
        invert_spd(&m, "metric")
    }

    /// `dM/dx_k`.
    pub fn d_metric_dx(
        &self,
        k: usize,
        x: &DVector<f64>,
        theta: &DVector<f64>,
        t: f64,
    ) -> Result<DMatrix<f64>> {
        (self.d_dx[k])(x, theta, t)
    }

    /// `dM/dtheta_i`.
    pub fn d_metric_dtheta(
        &self,
        i: usize,
        x: &DVector<f64>,
        theta: &DVector<f64>,
        t: f64,
    ) -> Result<DMatrix<f64>> {
        (self.d_dtheta[i])(x, theta, t)
    }

    /// Metric together with all its x-partials in one evaluation.
    pub fn metric_with_x_partials(
        &self,
        x: &DVector<f64>,
        theta: &DVector<f64>,
        t: f64,
    ) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        if let Some(bundle) = &self.bundle_x {
            return bundle(x, theta, t);
        }
        let m = self.metric_at(x, theta, t)?;
        let parts = (0..self.n)
            .map(|k| self.d_metric_dx(k, x, theta, t))
            .collect::<Result<_>>()?;
        Ok((m, parts))
    }

    /// Metric together with all its theta-partials in one evaluation.
    pub fn metric_with_theta_partials(
        &self,
        x: &DVector<f64>,
        theta: &DVector<f64>,
        t: f64,
    ) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        if let Some(bundle) = &self.bundle_theta {
            return bundle(x, theta, t);
        }
        let m = self.metric_at(x, theta, t)?;
        let parts = (0..self.p)
            .map(|i| self.d_metric_dtheta(i, x, theta, t))
            .collect::<Result<_>>()?;
        Ok((m, parts))
    }

    /// Dual metric together with its x-partials,
    /// `dW/dx_k = -W (dM/dx_k) W`.
    pub fn dual_partials_x(
        &self,
        x: &DVector<f64>,
        theta: &DVector<f64>,
        t: f64,
    ) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        let (m, dm) = self.metric_with_x_partials(x, theta, t)?;
        let w = invert_spd(&m, "metric")?;
        let parts = dm.iter().map(|d| -(&w * d * &w)).collect();
        Ok((w, parts))
    }
}

fn invert_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|ch| ch.inverse())
        .ok_or_else(|| Error::Degenerate(format!("{what} is not positive definite")))
}

/// One term of a polynomial in the stacked variables `(x, theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    /// Exponents, length `n + p`: first the state coordinates, then the
    /// parameters.
    pub exps: Vec<u8>,
    pub coeff: f64,
}

impl Monomial {
    fn eval(&self, x: &DVector<f64>, theta: &DVector<f64>) -> f64 {
        let n = x.len();
        let mut v = self.coeff;
        for (idx, &e) in self.exps.iter().enumerate() {
            if e == 0 {
                continue;
            }
            let base = if idx < n { x[idx] } else { theta[idx - n] };
            v *= base.powi(e as i32);
        }
        v
    }

    /// Value of the partial derivative with respect to stacked variable `j`.
    fn eval_partial(&self, j: usize, x: &DVector<f64>, theta: &DVector<f64>) -> f64 {
        let e = self.exps[j];
        if e == 0 {
            return 0.0;
        }
        let n = x.len();
        let mut v = self.coeff * e as f64;
        for (idx, &ei) in self.exps.iter().enumerate() {
            let pow = if idx == j { ei - 1 } else { ei };
            if pow == 0 {
                continue;
            }
            let base = if idx < n { x[idx] } else { theta[idx - n] };
            v *= base.powi(pow as i32);
        }
        v
    }
}

/// Polynomial dual metric: each upper-triangle entry of `W(x, theta)` is a
/// multivariate polynomial in the stacked variables, so `W` is symmetric by
/// construction. The primal metric is obtained by inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialMetric {
    n: usize,
    p: usize,
    degree: usize,
    /// Sorted by entry index `(i, j)` with `i <= j`.
    entries: Vec<((usize, usize), Vec<Monomial>)>,
}

impl PolynomialMetric {
    pub fn new(
        n: usize,
        p: usize,
        degree: usize,
        mut entries: Vec<((usize, usize), Vec<Monomial>)>,
    ) -> Result<Self> {
        for ((i, j), monos) in &entries {
            if *i > *j || *j >= n {
                return Err(Error::config(format!(
                    "entry index ({i},{j}) outside the upper triangle of an {n}x{n} matrix"
                )));
            }
            for m in monos {
                if m.exps.len() != n + p {
                    return Err(Error::config(format!(
                        "monomial exponent tuple has length {}, expected n + p = {}",
                        m.exps.len(),
                        n + p
                    )));
                }
                let total: u32 = m.exps.iter().map(|&e| e as u32).sum();
                if total as usize > degree {
                    return Err(Error::config(format!(
                        "monomial total degree {total} exceeds declared degree {degree}"
                    )));
                }
            }
        }
        entries.sort_by_key(|(ij, _)| *ij);
        Ok(Self { n, p, degree, entries })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }
    pub fn param_dim(&self) -> usize {
        self.p
    }
    pub fn degree(&self) -> usize {
        self.degree
    }
    pub fn entries(&self) -> &[((usize, usize), Vec<Monomial>)] {
        &self.entries
    }

    /// Total number of scalar coefficients.
    pub fn coeff_count(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    /// Flattens all coefficients in entry-then-monomial order.
    pub fn coeffs(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.coeff_count(),
            self.entries.iter().flat_map(|(_, m)| m.iter().map(|mo| mo.coeff)),
        )
    }

    /// Writes back a flattened coefficient vector (same order as [`coeffs`]).
    ///
    /// [`coeffs`]: Self::coeffs
    pub fn set_coeffs(&mut self, c: &DVector<f64>) {
        assert_eq!(c.len(), self.coeff_count());
        let mut k = 0;
        for (_, monos) in &mut self.entries {
            for m in monos {
                m.coeff = c[k];
                k += 1;
            }
        }
    }

    /// Evaluates `W(x, theta)` (symmetric).
    pub fn eval_w(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n, self.n);
        for ((i, j), monos) in &self.entries {
            let v: f64 = monos.iter().map(|m| m.eval(x, theta)).sum();
            w[(*i, *j)] = v;
            if i != j {
                w[(*j, *i)] = v;
            }
        }
        w
    }

    /// `dW/dv_j` where `j` indexes the stacked variables `(x, theta)`.
    pub fn eval_dw(&self, j: usize, x: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n, self.n);
        for ((i, jj), monos) in &self.entries {
            let v: f64 = monos.iter().map(|m| m.eval_partial(j, x, theta)).sum();
            w[(*i, *jj)] = v;
            if i != jj {
                w[(*jj, *i)] = v;
            }
        }
        w
    }

    pub fn eval_dw_dx(&self, k: usize, x: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        self.eval_dw(k, x, theta)
    }

    pub fn eval_dw_dtheta(&self, i: usize, x: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        self.eval_dw(self.n + i, x, theta)
    }

    /// Basis matrix of one coefficient: the symmetric zero/one pattern of
    /// its entry scaled by the monomial value with unit coefficient.
    pub(crate) fn basis_matrix(
        &self,
        flat_idx: usize,
        x: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> DMatrix<f64> {
        let (entry_idx, mono_idx) = self.locate(flat_idx);
        let ((i, j), monos) = &self.entries[entry_idx];
        let mut m = monos[mono_idx].clone();
        m.coeff = 1.0;
        let v = m.eval(x, theta);
        let mut out = DMatrix::zeros(self.n, self.n);
        out[(*i, *j)] = v;
        if i != j {
            out[(*j, *i)] = v;
        }
        out
    }

    /// x-partial of [`basis_matrix`] along stacked variable `k`.
    ///
    /// [`basis_matrix`]: Self::basis_matrix
    pub(crate) fn basis_matrix_partial(
        &self,
        flat_idx: usize,
        k: usize,
        x: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> DMatrix<f64> {
        let (entry_idx, mono_idx) = self.locate(flat_idx);
        let ((i, j), monos) = &self.entries[entry_idx];
        let mut m = monos[mono_idx].clone();
        m.coeff = 1.0;
        let v = m.eval_partial(k, x, theta);
        let mut out = DMatrix::zeros(self.n, self.n);
        out[(*i, *j)] = v;
        if i != j {
            out[(*j, *i)] = v;
        }
        out
    }

    fn locate(&self, flat_idx: usize) -> (usize, usize) {
        let mut k = flat_idx;
        for (e, (_, monos)) in self.entries.iter().enumerate() {
            if k < monos.len() {
                return (e, k);
            }
            k -= monos.len();
        }
        panic!("coefficient index {flat_idx} out of range");
    }
}

/// A polynomial dual metric together with the contraction rate and the
/// claimed uniform eigenvalue bounds of the primal metric; this is the
/// on-disk artifact format.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricArtifact {
    pub poly: PolynomialMetric,
    pub lambda: f64,
    /// `(m_lo, m_hi)`: claimed bounds for `M = W^{-1}` on the working domain.
    pub bounds: (f64, f64),
}

impl MetricArtifact {
    /// Builds the metric family: `M = W^{-1}`, `dM/dv = -M (dW/dv) M`.
    /// The bundled accessors share one dual evaluation and one inversion
    /// across all partials.
    pub fn family(&self) -> Result<MetricFamily> {
        let poly = Arc::new(self.poly.clone());
        let n = poly.state_dim();
        let p = poly.param_dim();

        let metric = {
            let poly = Arc::clone(&poly);
            Box::new(move |x: &DVector<f64>, th: &DVector<f64>, _t: f64| {
                invert_spd(&poly.eval_w(x, th), "dual metric")
            }) as MetricFn
        };
        let mk_partial = |stacked: usize| -> MetricFn {
            let poly = Arc::clone(&poly);
            Box::new(move |x: &DVector<f64>, th: &DVector<f64>, _t: f64| {
                let m = invert_spd(&poly.eval_w(x, th), "dual metric")?;
                let dw = poly.eval_dw(stacked, x, th);
                Ok(-(&m * dw * &m))
            })
        };
        let mk_bundle = |range: std::ops::Range<usize>| -> MetricBundleFn {
            let poly = Arc::clone(&poly);
            Box::new(move |x: &DVector<f64>, th: &DVector<f64>, _t: f64| {
                let m = invert_spd(&poly.eval_w(x, th), "dual metric")?;
                let parts = range
                    .clone()
                    .map(|v| {
                        let dw = poly.eval_dw(v, x, th);
                        -(&m * dw * &m)
                    })
                    .collect();
                Ok((m, parts))
            })
        };
        let mut family = MetricFamily::from_closures(
            n,
            p,
            self.lambda,
            self.bounds,
            metric,
            (0..n).map(mk_partial).collect(),
            (n..n + p).map(mk_partial).collect(),
        )?;
        family.bundle_x = Some(mk_bundle(0..n));
        family.bundle_theta = Some(mk_bundle(n..n + p));
        Ok(family)
    }

    /// Serializes to the line-oriented text format:
    ///
    /// ```text
    /// dims <n> <p> <degree>
    /// lambda <value>
    /// bounds <m_lo> <m_hi>
    /// coef <i> <j> <e_1> ... <e_{n+p}> <value>
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# polynomial dual metric W(x, theta); entries are upper-triangle");
        let _ = writeln!(
            s,
            "dims {} {} {}",
            self.poly.n, self.poly.p, self.poly.degree
        );
        let _ = writeln!(s, "lambda {}", self.lambda);
        let _ = writeln!(s, "bounds {} {}", self.bounds.0, self.bounds.1);
        for ((i, j), monos) in &self.poly.entries {
            for m in monos {
                let exps: Vec<String> = m.exps.iter().map(|e| e.to_string()).collect();
                let _ = writeln!(s, "coef {} {} {} {}", i, j, exps.join(" "), m.coeff);
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut dims: Option<(usize, usize, usize)> = None;
        let mut lambda: Option<f64> = None;
        let mut bounds: Option<(f64, f64)> = None;
        let mut entries: Vec<((usize, usize), Vec<Monomial>)> = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut tok = line.split_whitespace();
            let head = tok.next().unwrap();
            let bad = |msg: &str| Error::Parse(format!("metric file line {}: {msg}", lineno + 1));
            match head {
                "dims" => {
                    let vals: Vec<usize> = tok
                        .map(|v| v.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("dims expects three integers"))?;
                    if vals.len() != 3 {
                        return Err(bad("dims expects 'dims n p degree'"));
                    }
                    dims = Some((vals[0], vals[1], vals[2]));
                }
                "lambda" => {
                    lambda = Some(
                        tok.next()
                            .and_then(|v| v.parse::<f64>().ok())
                            .ok_or_else(|| bad("lambda expects one number"))?,
                    );
                }
                "bounds" => {
                    let vals: Vec<f64> = tok
                        .map(|v| v.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("bounds expects two numbers"))?;
                    if vals.len() != 2 {
                        return Err(bad("bounds expects 'bounds m_lo m_hi'"));
                    }
                    bounds = Some((vals[0], vals[1]));
                }
                "coef" => {
                    let (n, p, _) = dims.ok_or_else(|| bad("coef before dims"))?;
                    let toks: Vec<&str> = tok.collect();
                    if toks.len() != 2 + n + p + 1 {
                        return Err(bad(&format!(
                            "coef expects 'coef i j e_1..e_{} value'",
                            n + p
                        )));
                    }
                    let i: usize = toks[0].parse().map_err(|_| bad("bad entry row index"))?;
                    let j: usize = toks[1].parse().map_err(|_| bad("bad entry column index"))?;
                    let exps: Vec<u8> = toks[2..2 + n + p]
                        .iter()
                        .map(|v| v.parse::<u8>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("bad exponent"))?;
                    let coeff: f64 =
                        toks[2 + n + p].parse().map_err(|_| bad("bad coefficient"))?;
                    match entries.iter_mut().find(|(ij, _)| *ij == (i, j)) {
                        Some((_, monos)) => monos.push(Monomial { exps, coeff }),
                        None => entries.push(((i, j), vec![Monomial { exps, coeff }])),
                    }
                }
                other => return Err(bad(&format!("unknown directive '{other}'"))),
            }
        }

        let (n, p, degree) =
            dims.ok_or_else(|| Error::Parse("metric file missing 'dims' line".into()))?;
        let poly = PolynomialMetric::new(n, p, degree, entries)?;
        Ok(Self {
            poly,
            lambda: lambda.ok_or_else(|| Error::Parse("metric file missing 'lambda' line".into()))?,
            bounds: bounds.ok_or_else(|| Error::Parse("metric file missing 'bounds' line".into()))?,
        })
    }
}
