//! Moment conditions for the three identification strategies.
//!
//! Every strategy maps a [`LaggedRow`] and a parameter vector to a stack of
//! residuals interacted with instruments. Firm-level GMM works on the
//! time average of that stack; analytic Jacobians are provided for all
//! strategies so that Gauss-Newton type solvers and sandwich covariances
//! can be built on top.
//!
//! Parameter layouts (entries in brackets are dropped for two-input panels):
//!
//! | strategy | parameters | moments |
//! |---|---|---|
//! | GNR | `beta3, E, beta0, beta1, [beta2], delta` | `eps, exp(eps)-E, eta, eta k, [eta l], eta yr_lag` |
//! | GNR, AR(1) intercept | `beta3, E, beta1, [beta2], delta0, delta1` | same |
//! | ACF | `alpha0, alpha1, [alpha2], alpha3, beta0, beta1, [beta2], delta` | `eps, eps k, [eps l], eps m, v, v k, v k_lag, [v l_lag], v m_lag` |
//! | dynamic panel | `beta0, beta1, [beta2], beta3, delta` | `w, w k, [w l], w k_lag, [w l_lag], w m_lag` |
//!
//! In the GNR productivity equation the production intercept only enters
//! as a sum with the AR(1) constant, so the intercept layout carries a
//! single constant `delta0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::LaggedRow;

pub type ParamVector = DVector<f64>;
pub type MomentVector = DVector<f64>;

pub const MAX_PARAMS: usize = 8;
pub const MAX_MOMENTS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "gnr")]
    Gnr,
    #[serde(rename = "acf")]
    Acf,
    #[serde(rename = "dynpanel")]
    DynamicPanel,
}

/// Identification strategy plus functional-form options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct MomentSpec {
    strategy: Strategy,
    ar1_intercept: bool,
    labor: bool,
    layout: Layout,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RawSpec {
    strategy: Strategy,
    #[serde(default)]
    ar1_intercept: bool,
    #[serde(default = "yes")]
    labor: bool,
}

fn yes() -> bool {
    true
}

impl TryFrom<RawSpec> for MomentSpec {
    type Error = Error;
    fn try_from(r: RawSpec) -> Result<Self> {
        MomentSpec::new(r.strategy, r.ar1_intercept, r.labor)
    }
}

impl From<MomentSpec> for RawSpec {
    fn from(s: MomentSpec) -> Self {
        RawSpec {
            strategy: s.strategy,
            ar1_intercept: s.ar1_intercept,
            labor: s.labor,
        }
    }
}

/// Positions of the named parameters inside θ. Unused slots are `NONE`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    p: usize,
    q: usize,
    // GNR
    b3: usize,
    e: usize,
    // shared
    b0: usize,
    b1: usize,
    b2: usize,
    d0: usize,
    d1: usize,
    // ACF first stage
    a0: usize,
    a1: usize,
    a2: usize,
    a3: usize,
}

const NONE: usize = usize::MAX;

impl Layout {
    fn empty() -> Self {
        Layout {
            p: 0,
            q: 0,
            b3: NONE,
            e: NONE,
            b0: NONE,
            b1: NONE,
            b2: NONE,
            d0: NONE,
            d1: NONE,
            a0: NONE,
            a1: NONE,
            a2: NONE,
            a3: NONE,
        }
    }
}

fn next(p: &mut usize) -> usize {
    *p += 1;
    *p - 1
}

impl MomentSpec {
    pub fn new(strategy: Strategy, ar1_intercept: bool, labor: bool) -> Result<Self> {
        if ar1_intercept && strategy != Strategy::Gnr {
            return Err(Error::Config(format!(
                "{strategy:?}: an AR(1) intercept is not separately identified from the \
                 production intercept; use ar1_intercept = false"
            )));
        }
        let mut l = Layout::empty();
        let mut p = 0;
        match strategy {
            Strategy::Gnr => {
                l.b3 = next(&mut p);
                l.e = next(&mut p);
                if !ar1_intercept {
                    l.b0 = next(&mut p);
                }
                l.b1 = next(&mut p);
                if labor {
                    l.b2 = next(&mut p);
                }
                if ar1_intercept {
                    l.d0 = next(&mut p);
                }
                l.d1 = next(&mut p);
                l.q = if labor { 6 } else { 5 };
            }
            Strategy::Acf => {
                l.a0 = next(&mut p);
                l.a1 = next(&mut p);
                if labor {
                    l.a2 = next(&mut p);
                }
                l.a3 = next(&mut p);
                l.b0 = next(&mut p);
                l.b1 = next(&mut p);
                if labor {
                    l.b2 = next(&mut p);
                }
                l.d1 = next(&mut p);
                l.q = if labor { 9 } else { 7 };
            }
            Strategy::DynamicPanel => {
                l.b0 = next(&mut p);
                l.b1 = next(&mut p);
                if labor {
                    l.b2 = next(&mut p);
                }
                l.b3 = next(&mut p);
                l.d1 = next(&mut p);
                l.q = if labor { 6 } else { 4 };
            }
        }
        l.p = p;
        debug_assert!(l.q >= l.p);
        Ok(MomentSpec {
            strategy,
            ar1_intercept,
            labor,
            layout: l,
        })
    }

    pub fn gnr(ar1_intercept: bool, labor: bool) -> Self {
        Self::new(Strategy::Gnr, ar1_intercept, labor).expect("GNR layouts are always valid")
    }

    pub fn acf(labor: bool) -> Self {
        Self::new(Strategy::Acf, false, labor).expect("valid")
    }

    pub fn dynamic_panel(labor: bool) -> Self {
        Self::new(Strategy::DynamicPanel, false, labor).expect("valid")
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn ar1_intercept(&self) -> bool {
        self.ar1_intercept
    }

    pub fn labor(&self) -> bool {
        self.labor
    }

    /// Parameter count `P`.
    pub fn num_params(&self) -> usize {
        self.layout.p
    }

    /// Moment count `P'`.
    pub fn num_moments(&self) -> usize {
        self.layout.q
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        let l = &self.layout;
        let mut names = vec![""; l.p];
        let table: [(usize, &'static str); 11] = [
            (l.b3, "beta3"),
            (l.e, "E"),
            (l.b0, "beta0"),
            (l.b1, "beta1"),
            (l.b2, "beta2"),
            (l.d0, "delta0"),
            (l.d1, if self.ar1_intercept { "delta1" } else { "delta" }),
            (l.a0, "alpha0"),
            (l.a1, "alpha1"),
            (l.a2, "alpha2"),
            (l.a3, "alpha3"),
        ];
        for (i, name) in table {
            if i != NONE {
                names[i] = name;
            }
        }
        names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.param_names().iter().position(|n| *n == name)
    }

    /// Coefficient positions of (capital, labor, intermediates) in θ.
    /// Labor is `None` for two-input layouts; intermediates are `None` for
    /// ACF, which has no gross-output intermediate elasticity.
    pub fn elasticity_indices(&self) -> (usize, Option<usize>, Option<usize>) {
        let l = &self.layout;
        let opt = |i: usize| (i != NONE).then_some(i);
        let m = match self.strategy {
            Strategy::Acf => None,
            _ => opt(l.b3),
        };
        (l.b1, opt(l.b2), m)
    }

    /// Position of the AR(1) persistence of productivity, if any.
    pub fn persistence_index(&self) -> Option<usize> {
        (self.layout.d1 != NONE).then_some(self.layout.d1)
    }

    /// Production intercept position when it is a separate parameter.
    pub fn intercept_index(&self) -> Option<usize> {
        (self.layout.b0 != NONE).then_some(self.layout.b0)
    }

    /// A neutral starting point for pooled estimation.
    pub fn default_start(&self) -> ParamVector {
        let l = &self.layout;
        let mut th = DVector::zeros(l.p);
        let mut set = |i: usize, v: f64| {
            if i != NONE {
                th[i] = v;
            }
        };
        set(l.b3, 0.5);
        set(l.e, 1.0);
        set(l.b1, 0.3);
        set(l.b2, 0.3);
        set(l.d1, 0.5);
        set(l.a1, 0.3);
        set(l.a2, 0.3);
        set(l.a3, 0.3);
        th
    }

    /// True when θ is inside the domain where all residuals are defined.
    pub fn in_domain(&self, theta: &[f64]) -> bool {
        match self.strategy {
            Strategy::Gnr => theta[self.layout.b3] > 0.0 && theta[self.layout.e] > 0.0,
            _ => true,
        }
    }

    fn check_len(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.layout.p {
            return Err(Error::Shape(format!(
                "parameter vector has length {}, layout needs {}",
                theta.len(),
                self.layout.p
            )));
        }
        Ok(())
    }
}

fn at(th: &[f64], i: usize) -> f64 {
    if i == NONE {
        0.0
    } else {
        th[i]
    }
}

/// Residuals `(eps, eta)` of the share equation and the productivity
/// equation of the first-order-condition strategy.
pub fn gnr_residuals(row: &LaggedRow, theta: &[f64], spec: &MomentSpec) -> Result<(f64, f64)> {
    if spec.strategy != Strategy::Gnr {
        return Err(Error::Config("gnr_residuals needs a GNR layout".into()));
    }
    spec.check_len(theta)?;
    let l = &spec.layout;
    let (b3, e) = (theta[l.b3], theta[l.e]);
    if !(b3 > 0.0 && e > 0.0) {
        return Err(Error::Domain(format!(
            "beta3 = {b3} and E = {e} must both be positive"
        )));
    }
    let c = (b3 * e).ln();
    let eps = c - row.cur.s;
    let eps_lag = c - row.lag.s;
    let yr = row.cur.y - b3 * row.cur.m - eps;
    let yr_lag = row.lag.y - b3 * row.lag.m - eps_lag;
    let (b1, b2) = (theta[l.b1], at(theta, l.b2));
    let x_lag = yr_lag - b1 * row.lag.k - b2 * row.lag.l;
    let eta = yr - at(theta, l.b0) - b1 * row.cur.k - b2 * row.cur.l
        - at(theta, l.d0)
        - theta[l.d1] * x_lag;
    Ok((eps, eta))
}

/// Residuals `(eps, v)` of the control-function strategy with a linear
/// first stage.
pub fn acf_residuals(row: &LaggedRow, theta: &[f64], spec: &MomentSpec) -> Result<(f64, f64)> {
    if spec.strategy != Strategy::Acf {
        return Err(Error::Config("acf_residuals needs an ACF layout".into()));
    }
    spec.check_len(theta)?;
    let l = &spec.layout;
    let phi = |v: &crate::panel::Vars| {
        theta[l.a0] + theta[l.a1] * v.k + at(theta, l.a2) * v.l + theta[l.a3] * v.m
    };
    let (b0, b1, b2, d) = (theta[l.b0], theta[l.b1], at(theta, l.b2), theta[l.d1]);
    let eps = row.cur.y - phi(&row.cur);
    let omega_lag = phi(&row.lag) - b0 - b1 * row.lag.k - b2 * row.lag.l;
    let v = row.cur.y - b0 - b1 * row.cur.k - b2 * row.cur.l - d * omega_lag;
    Ok((eps, v))
}

/// Quasi-differenced residual `w` of the dynamic panel strategy.
pub fn dynpanel_residual(row: &LaggedRow, theta: &[f64], spec: &MomentSpec) -> Result<f64> {
    if spec.strategy != Strategy::DynamicPanel {
        return Err(Error::Config(
            "dynpanel_residual needs a dynamic panel layout".into(),
        ));
    }
    spec.check_len(theta)?;
    let l = &spec.layout;
    let d = theta[l.d1];
    let qd = |cur: f64, lag: f64| cur - d * lag;
    let (c, p) = (&row.cur, &row.lag);
    Ok(qd(c.y, p.y)
        - (1.0 - d) * theta[l.b0]
        - theta[l.b1] * qd(c.k, p.k)
        - at(theta, l.b2) * qd(c.l, p.l)
        - theta[l.b3] * qd(c.m, p.m))
}

/// Residual used for fit statistics: `eta + eps` (GNR), `v + eps` (ACF),
/// `w` (dynamic panel).
pub fn composite_residual(row: &LaggedRow, theta: &[f64], spec: &MomentSpec) -> Result<f64> {
    match spec.strategy {
        Strategy::Gnr => gnr_residuals(row, theta, spec).map(|(e, n)| e + n),
        Strategy::Acf => acf_residuals(row, theta, spec).map(|(e, v)| e + v),
        Strategy::DynamicPanel => dynpanel_residual(row, theta, spec),
    }
}

type Jac = [[f64; MAX_PARAMS]; MAX_MOMENTS];

/// Moments of one row and, optionally, their derivatives.
fn eval_row(
    row: &LaggedRow,
    th: &[f64],
    spec: &MomentSpec,
    g: &mut [f64; MAX_MOMENTS],
    jac: Option<&mut Jac>,
) -> Result<()> {
    let l = &spec.layout;
    let p = l.p;
    let (c, lg) = (&row.cur, &row.lag);
    match spec.strategy {
        Strategy::Gnr => {
            let (b3, e) = (th[l.b3], th[l.e]);
            if !(b3 > 0.0 && e > 0.0) {
                return Err(Error::Domain(format!(
                    "beta3 = {b3} and E = {e} must both be positive"
                )));
            }
            let cst = (b3 * e).ln();
            let eps = cst - c.s;
            let eps_lag = cst - lg.s;
            let yr = c.y - b3 * c.m - eps;
            let yr_lag = lg.y - b3 * lg.m - eps_lag;
            let (b1, b2, d1) = (th[l.b1], at(th, l.b2), th[l.d1]);
            let x_lag = yr_lag - b1 * lg.k - b2 * lg.l;
            let eta = yr - at(th, l.b0) - b1 * c.k - b2 * c.l - at(th, l.d0) - d1 * x_lag;
            let ex = eps.exp();

            let mut i = 0;
            let mut push = |v: f64| {
                g[i] = v;
                i += 1;
            };
            push(eps);
            push(ex - e);
            push(eta);
            push(eta * c.k);
            if spec.labor {
                push(eta * c.l);
            }
            push(eta * yr_lag);

            if let Some(jac) = jac {
                let mut deps = [0.0; MAX_PARAMS];
                deps[l.b3] = 1.0 / b3;
                deps[l.e] = 1.0 / e;
                let mut dyr_lag = [0.0; MAX_PARAMS];
                dyr_lag[l.b3] = -lg.m - 1.0 / b3;
                dyr_lag[l.e] = -1.0 / e;
                let mut deta = [0.0; MAX_PARAMS];
                deta[l.b3] = (-c.m - 1.0 / b3) - d1 * dyr_lag[l.b3];
                deta[l.e] = -1.0 / e + d1 / e;
                if l.b0 != NONE {
                    deta[l.b0] = -1.0;
                }
                deta[l.b1] = -c.k + d1 * lg.k;
                if l.b2 != NONE {
                    deta[l.b2] = -c.l + d1 * lg.l;
                }
                if l.d0 != NONE {
                    deta[l.d0] = -1.0;
                }
                deta[l.d1] = -x_lag;

                let mut r = 0;
                jac[r][..p].copy_from_slice(&deps[..p]);
                r += 1;
                for j in 0..p {
                    jac[r][j] = ex * deps[j];
                }
                jac[r][l.e] -= 1.0;
                r += 1;
                jac[r][..p].copy_from_slice(&deta[..p]);
                r += 1;
                for j in 0..p {
                    jac[r][j] = c.k * deta[j];
                }
                r += 1;
                if spec.labor {
                    for j in 0..p {
                        jac[r][j] = c.l * deta[j];
                    }
                    r += 1;
                }
                for j in 0..p {
                    jac[r][j] = yr_lag * deta[j] + eta * dyr_lag[j];
                }
            }
        }
        Strategy::Acf => {
            let phi = |v: &crate::panel::Vars| {
                th[l.a0] + th[l.a1] * v.k + at(th, l.a2) * v.l + th[l.a3] * v.m
            };
            let (b0, b1, b2, d) = (th[l.b0], th[l.b1], at(th, l.b2), th[l.d1]);
            let eps = c.y - phi(c);
            let omega_lag = phi(lg) - b0 - b1 * lg.k - b2 * lg.l;
            let v = c.y - b0 - b1 * c.k - b2 * c.l - d * omega_lag;

            let eps_inst: &[f64] = if spec.labor {
                &[1.0, c.k, c.l, c.m]
            } else {
                &[1.0, c.k, c.m]
            };
            let v_inst: &[f64] = if spec.labor {
                &[1.0, c.k, lg.k, lg.l, lg.m]
            } else {
                &[1.0, c.k, lg.k, lg.m]
            };
            for (i, z) in eps_inst.iter().enumerate() {
                g[i] = eps * z;
            }
            let off = eps_inst.len();
            for (i, z) in v_inst.iter().enumerate() {
                g[off + i] = v * z;
            }

            if let Some(jac) = jac {
                let mut deps = [0.0; MAX_PARAMS];
                let mut dv = [0.0; MAX_PARAMS];
                deps[l.a0] = -1.0;
                deps[l.a1] = -c.k;
                deps[l.a3] = -c.m;
                dv[l.a0] = -d;
                dv[l.a1] = -d * lg.k;
                dv[l.a3] = -d * lg.m;
                if l.a2 != NONE {
                    deps[l.a2] = -c.l;
                    dv[l.a2] = -d * lg.l;
                }
                dv[l.b0] = -1.0 + d;
                dv[l.b1] = -c.k + d * lg.k;
                if l.b2 != NONE {
                    dv[l.b2] = -c.l + d * lg.l;
                }
                dv[l.d1] = -omega_lag;
                for (i, z) in eps_inst.iter().enumerate() {
                    for j in 0..p {
                        jac[i][j] = z * deps[j];
                    }
                }
                for (i, z) in v_inst.iter().enumerate() {
                    for j in 0..p {
                        jac[off + i][j] = z * dv[j];
                    }
                }
            }
        }
        Strategy::DynamicPanel => {
            let d = th[l.d1];
            let qd = |cur: f64, lag: f64| cur - d * lag;
            let (b0, b1, b2, b3) = (th[l.b0], th[l.b1], at(th, l.b2), th[l.b3]);
            let w = qd(c.y, lg.y)
                - (1.0 - d) * b0
                - b1 * qd(c.k, lg.k)
                - b2 * qd(c.l, lg.l)
                - b3 * qd(c.m, lg.m);
            let inst: &[f64] = if spec.labor {
                &[1.0, c.k, c.l, lg.k, lg.l, lg.m]
            } else {
                &[1.0, c.k, lg.k, lg.m]
            };
            for (i, z) in inst.iter().enumerate() {
                g[i] = w * z;
            }
            if let Some(jac) = jac {
                let mut dw = [0.0; MAX_PARAMS];
                dw[l.b0] = -(1.0 - d);
                dw[l.b1] = -qd(c.k, lg.k);
                if l.b2 != NONE {
                    dw[l.b2] = -qd(c.l, lg.l);
                }
                dw[l.b3] = -qd(c.m, lg.m);
                dw[l.d1] = -lg.y + b0 + b1 * lg.k + b2 * lg.l + b3 * lg.m;
                for (i, z) in inst.iter().enumerate() {
                    for j in 0..p {
                        jac[i][j] = z * dw[j];
                    }
                }
            }
        }
    }
    Ok(())
}

/// Per-period moment vector `g(xi_i^t, theta)` of length `P'`.
pub fn moment_vector(row: &LaggedRow, theta: &[f64], spec: &MomentSpec) -> Result<MomentVector> {
    spec.check_len(theta)?;
    let mut g = [0.0; MAX_MOMENTS];
    eval_row(row, theta, spec, &mut g, None)?;
    Ok(DVector::from_column_slice(&g[..spec.num_moments()]))
}

/// Time-averaged moments of one firm over its usable periods.
pub fn firm_avg_moments(
    rows: &[LaggedRow],
    theta: &[f64],
    spec: &MomentSpec,
) -> Result<MomentVector> {
    if rows.is_empty() {
        return Err(Error::Shape("firm has no usable periods".into()));
    }
    spec.check_len(theta)?;
    let q = spec.num_moments();
    let mut acc = [0.0; MAX_MOMENTS];
    let mut g = [0.0; MAX_MOMENTS];
    for row in rows {
        eval_row(row, theta, spec, &mut g, None)?;
        for i in 0..q {
            acc[i] += g[i];
        }
    }
    let n = rows.len() as f64;
    Ok(DVector::from_iterator(q, acc[..q].iter().map(|v| v / n)))
}

/// Averaged moments and their `P' x P` Jacobian for one firm.
pub fn firm_moments_jacobian(
    rows: &[LaggedRow],
    theta: &[f64],
    spec: &MomentSpec,
) -> Result<(MomentVector, DMatrix<f64>)> {
    if rows.is_empty() {
        return Err(Error::Shape("firm has no usable periods".into()));
    }
    spec.check_len(theta)?;
    let (p, q) = (spec.num_params(), spec.num_moments());
    let mut acc = [0.0; MAX_MOMENTS];
    let mut jacc = [[0.0; MAX_PARAMS]; MAX_MOMENTS];
    let mut g = [0.0; MAX_MOMENTS];
    let mut jac = [[0.0; MAX_PARAMS]; MAX_MOMENTS];
    for row in rows {
        eval_row(row, theta, spec, &mut g, Some(&mut jac))?;
        for i in 0..q {
            acc[i] += g[i];
            for j in 0..p {
                jacc[i][j] += jac[i][j];
            }
        }
    }
    let n = rows.len() as f64;
    let gbar = DVector::from_iterator(q, acc[..q].iter().map(|v| v / n));
    let d = DMatrix::from_fn(q, p, |i, j| jacc[i][j] / n);
    Ok((gbar, d))
}

/// Symmetric positive definite `P' x P'` weighting matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(DMatrix<f64>);

impl WeightMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Shape("weighting matrix must be square".into()));
        }
        let asym = (&m - m.transpose()).abs().max();
        if asym > 1e-10 * (1.0 + m.abs().max()) {
            return Err(Error::Domain("weighting matrix is not symmetric".into()));
        }
        if m.clone().cholesky().is_none() {
            return Err(Error::Domain(
                "weighting matrix is not positive definite".into(),
            ));
        }
        Ok(WeightMatrix(m))
    }

    pub fn identity(q: usize) -> Self {
        WeightMatrix(DMatrix::identity(q, q))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn quad(&self, g: &DVector<f64>) -> f64 {
        g.dot(&(&self.0 * g))
    }
}

/// Firm GMM criterion `gbar' W gbar`.
pub fn gmm_objective(
    rows: &[LaggedRow],
    theta: &[f64],
    w: &WeightMatrix,
    spec: &MomentSpec,
) -> Result<f64> {
    let g = firm_avg_moments(rows, theta, spec)?;
    check_w(w, spec)?;
    Ok(w.quad(&g))
}

/// Analytic gradient `2 D' W gbar` of the firm GMM criterion.
pub fn gmm_gradient(
    rows: &[LaggedRow],
    theta: &[f64],
    w: &WeightMatrix,
    spec: &MomentSpec,
) -> Result<ParamVector> {
    check_w(w, spec)?;
    let (g, d) = firm_moments_jacobian(rows, theta, spec)?;
    Ok(2.0 * d.transpose() * (w.matrix() * g))
}

fn check_w(w: &WeightMatrix, spec: &MomentSpec) -> Result<()> {
    if w.dim() != spec.num_moments() {
        return Err(Error::Shape(format!(
            "weighting matrix is {0}x{0}, layout has {1} moments",
            w.dim(),
            spec.num_moments()
        )));
    }
    Ok(())
}

/// Result of building an efficient weighting matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Weighting {
    pub matrix: WeightMatrix,
    /// Set when the moment covariance could not be inverted and the
    /// identity was used instead.
    pub fell_back: bool,
}

/// Relative ridge added to the moment covariance before inversion.
pub const WEIGHT_RIDGE: f64 = 1e-10;

/// Inverse of a moment covariance `S` with a small ridge on the diagonal,
/// or the identity when that fails.
pub fn invert_moment_covariance(s: &DMatrix<f64>) -> Weighting {
    let q = s.nrows();
    let ridge = WEIGHT_RIDGE * s.trace() / q as f64;
    let fallback = Weighting {
        matrix: WeightMatrix::identity(q),
        fell_back: true,
    };
    if !(ridge.is_finite() && ridge > 0.0) {
        return fallback;
    }
    let mut a = s.clone();
    for i in 0..q {
        a[(i, i)] += ridge;
    }
    let a = (&a + a.transpose()) * 0.5;
    match a.cholesky() {
        Some(ch) => {
            let inv = ch.inverse();
            let inv = (&inv + inv.transpose()) * 0.5;
            match WeightMatrix::new(inv) {
                Ok(m) if m.0.iter().all(|v| v.is_finite()) => Weighting {
                    matrix: m,
                    fell_back: false,
                },
                _ => fallback,
            }
        }
        None => fallback,
    }
}

/// Outer-product moment covariance `1/T sum_t g_t g_t'` of one firm.
pub fn moment_covariance(
    rows: &[LaggedRow],
    theta: &[f64],
    spec: &MomentSpec,
) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Shape("firm has no usable periods".into()));
    }
    spec.check_len(theta)?;
    let q = spec.num_moments();
    let mut s = DMatrix::zeros(q, q);
    let mut g = [0.0; MAX_MOMENTS];
    for row in rows {
        eval_row(row, theta, spec, &mut g, None)?;
        for i in 0..q {
            for j in 0..q {
                s[(i, j)] += g[i] * g[j];
            }
        }
    }
    Ok(s / rows.len() as f64)
}

/// Two-step efficient weighting built from first-step estimates.
pub fn optimal_weighting(
    rows: &[LaggedRow],
    theta_first_step: &[f64],
    spec: &MomentSpec,
) -> Result<Weighting> {
    let s = moment_covariance(rows, theta_first_step, spec)?;
    Ok(invert_moment_covariance(&s))
}
