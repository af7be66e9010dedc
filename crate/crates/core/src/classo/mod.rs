//! Classifier-Lasso: penalized GMM that shrinks firm parameters toward a
//! small number of group centers.
//!
//! The criterion `(1/N) sum_i [gbar_i' W_i gbar_i + lambda prod_j ||pi_i - theta_j||]`
//! is not convex, but splits into `J` subproblems that are. Subproblem `j`
//! keeps its own copy `pi^<j>` of the firm parameters and fixes the other
//! factors of the product as weights `zeta_i^<j>`; it is solved by
//! alternating a weighted geometric median for `theta_j` with `N`
//! independent penalized firm problems. The outer loop cycles over the
//! subproblems until the summed criterion settles.

pub mod classify;
pub mod post_lasso;
pub mod weiszfeld;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{optimal_weighting, MomentSpec, WeightMatrix};
use crate::panel::{LaggedRow, PanelData};
use crate::solver::{
    minimize, minimize_multistart, FirmSystem, GroupSystem, Penalty, SolveOptions,
};

pub use classify::{classify, classify_distances, match_labels, Classification, LabelMatch};
pub use post_lasso::{
    post_lasso, sandwich_covariance, sandwich_se, Covariance, GroupEstimate, GroupEstimates,
};
pub use weiszfeld::{weighted_distance_sum, weighted_geometric_median};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingScheme {
    #[default]
    Identity,
    TwoStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CLassoConfig {
    /// Number of groups `J`.
    pub groups: usize,
    /// Penalty level; `None` means `T^-0.25` with `T` the longest usable
    /// firm history.
    pub lambda: Option<f64>,
    pub outer_tol: f64,
    pub inner_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Firms farther than this from every center stay unclassified.
    pub classification_threshold: Option<f64>,
    pub weighting: WeightingScheme,
}

impl Default for CLassoConfig {
    fn default() -> Self {
        Self {
            groups: 1,
            lambda: None,
            outer_tol: 1e-6,
            inner_tol: 1e-6,
            max_outer: 200,
            max_inner: 100,
            classification_threshold: None,
            weighting: WeightingScheme::Identity,
        }
    }
}

impl CLassoConfig {
    pub fn with_groups(groups: usize) -> Self {
        Self {
            groups,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::Config("number of groups must be at least 1".into()));
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda must be positive, got {l}")));
            }
        }
        if !(self.outer_tol > 0.0 && self.inner_tol > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::Config("iteration caps must be positive".into()));
        }
        if let Some(eps) = self.classification_threshold {
            if !(eps > 0.0) {
                return Err(Error::Config(format!(
                    "classification threshold must be positive, got {eps}"
                )));
            }
        }
        Ok(())
    }

    pub fn lambda_for(&self, panel: &PanelData) -> f64 {
        self.lambda
            .unwrap_or_else(|| default_lambda(panel.max_usable()))
    }
}

/// `T^-0.25`.
pub fn default_lambda(t: usize) -> f64 {
    (t as f64).powf(-0.25)
}

/// Firm-by-firm GMM estimates and weighting matrices. They do not depend
/// on `lambda` or `J` and can be reused across fits of the same panel.
#[derive(Debug, Clone)]
pub struct FirmEstimates {
    pub spec: MomentSpec,
    pub weighting: WeightingScheme,
    /// Pooled GMM estimate over all firms.
    pub pooled: DVector<f64>,
    pub theta: Vec<DVector<f64>>,
    pub weights: Vec<WeightMatrix>,
    /// Firms whose efficient weighting fell back to the identity.
    pub weight_fallback: Vec<bool>,
    pub converged: Vec<bool>,
}

fn perturbed_starts(center: &DVector<f64>) -> Vec<DVector<f64>> {
    let scale = |x: f64| 0.2 * x.abs().max(0.1);
    let signs: [fn(usize) -> f64; 4] = [
        |_| 1.0,
        |_| -1.0,
        |k| if k % 2 == 0 { 1.0 } else { -1.0 },
        |k| if k % 2 == 0 { -1.0 } else { 1.0 },
    ];
    let mut starts = vec![center.clone()];
    for s in signs {
        starts.push(DVector::from_iterator(
            center.len(),
            center.iter().enumerate().map(|(k, &x)| x + s(k) * scale(x)),
        ));
    }
    starts
}

/// Pooled GMM with identity weighting over all firms.
pub fn pooled_estimate(lags: &[Vec<LaggedRow>], spec: &MomentSpec) -> Result<DVector<f64>> {
    let sys = GroupSystem {
        firms: lags.iter().map(|r| r.as_slice()).collect(),
        spec,
    };
    let w = WeightMatrix::identity(spec.num_moments());
    let start = spec.default_start();
    let sol = minimize_multistart(&sys, &w, None, &perturbed_starts(&start), &SolveOptions::default())?;
    Ok(sol.theta)
}

/// Unpenalized GMM for every firm, started from the pooled estimate and
/// four perturbations of it.
pub fn firm_estimates(
    panel: &PanelData,
    spec: &MomentSpec,
    weighting: WeightingScheme,
) -> Result<FirmEstimates> {
    check_panel(panel, spec)?;
    let lags = panel.build_lags();
    let pooled = pooled_estimate(&lags, spec)?;
    let starts = perturbed_starts(&pooled);
    let q = spec.num_moments();
    let opts = SolveOptions::default();
    let ident = WeightMatrix::identity(q);

    let solved: Vec<Result<(DVector<f64>, WeightMatrix, bool, bool)>> = lags
        .par_iter()
        .enumerate()
        .map(|(i, rows)| {
            let sys = FirmSystem { rows, spec };
            let fail = |e: Error| Error::InitialEstimate {
                firm: panel.firms()[i].id.clone(),
                msg: e.to_string(),
            };
            let first = minimize_multistart(&sys, &ident, None, &starts, &opts).map_err(fail)?;
            match weighting {
                WeightingScheme::Identity => Ok((first.theta, ident.clone(), false, first.converged)),
                WeightingScheme::TwoStep => {
                    let wt = optimal_weighting(rows, first.theta.as_slice(), spec).map_err(fail)?;
                    let second =
                        minimize(&sys, &wt.matrix, None, &first.theta, &opts).map_err(fail)?;
                    Ok((second.theta, wt.matrix, wt.fell_back, second.converged))
                }
            }
        })
        .collect();

    let mut out = FirmEstimates {
        spec: *spec,
        weighting,
        pooled,
        theta: Vec::with_capacity(lags.len()),
        weights: Vec::with_capacity(lags.len()),
        weight_fallback: Vec::with_capacity(lags.len()),
        converged: Vec::with_capacity(lags.len()),
    };
    for r in solved {
        let (th, w, fb, conv) = r?;
        out.theta.push(th);
        out.weights.push(w);
        out.weight_fallback.push(fb);
        out.converged.push(conv);
    }
    Ok(out)
}

fn check_panel(panel: &PanelData, spec: &MomentSpec) -> Result<()> {
    if panel.num_firms() == 0 {
        return Err(Error::EmptyPanel);
    }
    if spec.labor() && !panel.has_labor() {
        return Err(Error::Config(
            "moment layout uses labor but the panel has no labor column; \
             set \"labor\": false in the moment spec"
                .into(),
        ));
    }
    Ok(())
}

fn norm_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm()
}

/// Full penalized criterion
/// `(1/N) sum_i [gbar_i' W_i gbar_i + lambda prod_j ||pi_i - theta_j||]`.
pub fn pgmm_objective(
    lags: &[Vec<LaggedRow>],
    pi: &[DVector<f64>],
    theta: &[DVector<f64>],
    lambda: f64,
    weights: &[WeightMatrix],
    spec: &MomentSpec,
) -> Result<f64> {
    let n = lags.len();
    if pi.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "{n} firms, {} parameter vectors, {} weighting matrices",
            pi.len(),
            weights.len()
        )));
    }
    if theta.is_empty() {
        return Err(Error::Shape("no group centers".into()));
    }
    let p = spec.num_params();
    if pi.iter().chain(theta).any(|v| v.len() != p) {
        return Err(Error::Shape(format!("parameter vectors must have length {p}")));
    }
    let mut total = 0.0;
    for i in 0..n {
        let g = crate::moments::firm_avg_moments(&lags[i], pi[i].as_slice(), spec)?;
        let pen: f64 = theta.iter().map(|t| norm_diff(&pi[i], t)).product();
        total += weights[i].quad(&g) + lambda * pen;
    }
    Ok(total / n as f64)
}

/// Iterates of the `J` subproblems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CLassoState {
    /// `pi[j][i]`: firm `i`'s parameters in subproblem `j`.
    pub pi: Vec<Vec<DVector<f64>>>,
    pub theta: Vec<DVector<f64>>,
    /// `zeta[i][j] = prod_{j' != j} ||pi[j'][i] - theta[j']||`.
    pub zeta: Vec<Vec<f64>>,
    pub outer_value: f64,
}

impl CLassoState {
    /// Every copy at the firm-wise estimates, every center at zero.
    pub fn initial(firm: &[DVector<f64>], groups: usize, p: usize) -> Self {
        let mut s = Self {
            pi: vec![firm.to_vec(); groups],
            theta: vec![DVector::zeros(p); groups],
            zeta: Vec::new(),
            outer_value: f64::NAN,
        };
        s.refresh_zeta();
        s
    }

    pub fn num_groups(&self) -> usize {
        self.theta.len()
    }

    pub fn num_firms(&self) -> usize {
        self.pi.first().map_or(0, |v| v.len())
    }

    /// `||pi[j][i] - theta[j]||` as an `N x J` matrix.
    pub fn copy_distances(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.num_firms(), self.num_groups(), |i, j| {
            norm_diff(&self.pi[j][i], &self.theta[j])
        })
    }

    pub fn zeta_for(&self, i: usize, j: usize) -> f64 {
        (0..self.num_groups())
            .filter(|&k| k != j)
            .map(|k| norm_diff(&self.pi[k][i], &self.theta[k]))
            .product()
    }

    pub fn refresh_zeta(&mut self) {
        let (n, jn) = (self.num_firms(), self.num_groups());
        self.zeta = (0..n)
            .map(|i| (0..jn).map(|j| self.zeta_for(i, j)).collect())
            .collect();
    }
}

/// Subproblem criterion `(1/N) sum_i [gbar_i' W_i gbar_i + lambda zeta_i ||pi_i - theta||]`.
fn inner_value(
    lags: &[Vec<LaggedRow>],
    pi: &[DVector<f64>],
    theta: &DVector<f64>,
    zeta: &[f64],
    lambda: f64,
    weights: &[WeightMatrix],
    spec: &MomentSpec,
) -> Result<f64> {
    let terms: Vec<Result<f64>> = (0..lags.len())
        .into_par_iter()
        .map(|i| {
            let g = crate::moments::firm_avg_moments(&lags[i], pi[i].as_slice(), spec)?;
            Ok(weights[i].quad(&g) + lambda * zeta[i] * norm_diff(&pi[i], theta))
        })
        .collect();
    let mut total = 0.0;
    for t in terms {
        total += t?;
    }
    Ok(total / lags.len() as f64)
}

fn outer_value(
    lags: &[Vec<LaggedRow>],
    state: &CLassoState,
    lambda: f64,
    weights: &[WeightMatrix],
    spec: &MomentSpec,
) -> Result<f64> {
    let mut total = 0.0;
    for j in 0..state.num_groups() {
        let zeta: Vec<f64> = (0..state.num_firms()).map(|i| state.zeta_for(i, j)).collect();
        total += inner_value(lags, &state.pi[j], &state.theta[j], &zeta, lambda, weights, spec)?;
    }
    Ok(total)
}

/// Penalized GMM for one firm:
/// `argmin gbar(pi)' W gbar(pi) + lambda zeta ||pi - center||`, from `init`.
#[derive(Debug, Clone, PartialEq)]
pub struct FirmSolve {
    pub theta: DVector<f64>,
    pub value: f64,
    /// False when the iteration cap was hit; `theta` is still the best
    /// point found.
    pub converged: bool,
}

pub fn solve_firm_subproblem(
    rows: &[LaggedRow],
    center: &DVector<f64>,
    lambda: f64,
    zeta: f64,
    w: &WeightMatrix,
    spec: &MomentSpec,
    init: &DVector<f64>,
) -> Result<FirmSolve> {
    if !(zeta >= 0.0) || !(lambda >= 0.0) {
        return Err(Error::Domain("penalty weights must be non-negative".into()));
    }
    let sys = FirmSystem { rows, spec };
    let pen = Penalty {
        center: center.as_slice(),
        weight: lambda * zeta,
    };
    let sol = minimize(&sys, w, Some(&pen), init, &SolveOptions::default())?;
    Ok(FirmSolve {
        theta: sol.theta,
        value: sol.value,
        converged: sol.converged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcsResult {
    pub pi: Vec<DVector<f64>>,
    pub theta: DVector<f64>,
    /// Subproblem criterion at the start and after every alternation.
    pub trace: Vec<f64>,
    pub converged: bool,
    /// Firm solves that hit their iteration cap in the last alternation.
    pub unconverged_firms: usize,
}

const MEDIAN_TOL: f64 = 1e-10;
const MEDIAN_MAX_ITER: usize = 1000;

/// Alternates the center update (weighted geometric median of the firm
/// copies) with independent penalized firm solves until the relative
/// change of the subproblem criterion drops below `inner_tol`.
#[allow(clippy::too_many_arguments)]
pub fn alternate_convex_search(
    lags: &[Vec<LaggedRow>],
    theta_init: &DVector<f64>,
    pi_init: &[DVector<f64>],
    zeta: &[f64],
    lambda: f64,
    weights: &[WeightMatrix],
    spec: &MomentSpec,
    inner_tol: f64,
    max_inner: usize,
) -> Result<AcsResult> {
    let n = lags.len();
    if pi_init.len() != n || zeta.len() != n || weights.len() != n {
        return Err(Error::Shape("subproblem inputs disagree on the number of firms".into()));
    }
    let mut pi = pi_init.to_vec();
    let mut theta = theta_init.clone();
    let mut q_prev = inner_value(lags, &pi, &theta, zeta, lambda, weights, spec)?;
    let mut trace = vec![q_prev];
    let mut converged = false;
    let mut unconverged_firms = 0;

    for _ in 0..max_inner {
        if zeta.iter().any(|z| *z > 0.0) {
            theta = weighted_geometric_median(&pi, zeta, Some(&theta), MEDIAN_TOL, MEDIAN_MAX_ITER)?;
        }
        let solves: Vec<Result<FirmSolve>> = (0..n)
            .into_par_iter()
            .map(|i| solve_firm_subproblem(&lags[i], &theta, lambda, zeta[i], &weights[i], spec, &pi[i]))
            .collect();
        unconverged_firms = 0;
        for (i, s) in solves.into_iter().enumerate() {
            let s = s?;
            unconverged_firms += usize::from(!s.converged);
            pi[i] = s.theta;
        }
        let q = inner_value(lags, &pi, &theta, zeta, lambda, weights, spec)?;
        trace.push(q);
        let done = (q - q_prev).abs() / (q_prev + 1.0) < inner_tol;
        q_prev = q;
        if done {
            converged = true;
            break;
        }
    }
    Ok(AcsResult {
        pi,
        theta,
        trace,
        converged,
        unconverged_firms,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub config: CLassoConfig,
    pub spec: MomentSpec,
    pub lambda: f64,
    #[serde(skip)]
    pub state: CLassoState,
    pub classification: Classification,
    /// Firm parameters from the subproblem of the assigned (or nearest) group.
    #[serde(skip)]
    pub pi_hat: Vec<DVector<f64>>,
    pub estimates: GroupEstimates,
    /// Summed criterion after Step 0 and after every accepted outer iteration.
    pub outer_trace: Vec<f64>,
    #[serde(skip)]
    pub inner_traces: Vec<Vec<f64>>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// Penalized estimation, classification and post-Lasso re-estimation.
pub fn fit(panel: &PanelData, config: &CLassoConfig, spec: &MomentSpec) -> Result<FitResult> {
    config.validate()?;
    let init = firm_estimates(panel, spec, config.weighting)?;
    fit_with(panel, config, spec, &init)
}

/// [`fit`] with precomputed firm-wise estimates.
pub fn fit_with(
    panel: &PanelData,
    config: &CLassoConfig,
    spec: &MomentSpec,
    init: &FirmEstimates,
) -> Result<FitResult> {
    config.validate()?;
    check_panel(panel, spec)?;
    let n = panel.num_firms();
    let jn = config.groups;
    if jn > n {
        return Err(Error::Config(format!("{jn} groups for {n} firms")));
    }
    if init.theta.len() != n || init.spec != *spec {
        return Err(Error::Shape(
            "firm-wise estimates were computed for a different panel or layout".into(),
        ));
    }
    if init.weighting != config.weighting {
        return Err(Error::Config(
            "firm-wise estimates were computed with a different weighting scheme".into(),
        ));
    }
    let lags = panel.build_lags();
    let lambda = config.lambda_for(panel);
    let weights = &init.weights;
    let mut warnings = Vec::new();

    let mut state = CLassoState::initial(&init.theta, jn, spec.num_params());
    let mut q_prev = outer_value(&lags, &state, lambda, weights, spec)?;
    let mut outer_trace = vec![q_prev];
    let mut inner_traces = Vec::new();
    let mut converged = false;

    for r in 1..=config.max_outer {
        let saved = (state.pi.clone(), state.theta.clone());
        for j in 0..jn {
            let zeta: Vec<f64> = (0..n).map(|i| state.zeta_for(i, j)).collect();
            let acs = alternate_convex_search(
                &lags,
                &state.theta[j],
                &state.pi[j],
                &zeta,
                lambda,
                weights,
                spec,
                config.inner_tol,
                config.max_inner,
            )?;
            if !acs.converged {
                warnings.push(format!(
                    "outer iteration {r}, subproblem {}: inner loop hit its cap",
                    j + 1
                ));
            }
            state.pi[j] = acs.pi;
            state.theta[j] = acs.theta;
            inner_traces.push(acs.trace);
        }
        let q = outer_value(&lags, &state, lambda, weights, spec)?;
        if q > q_prev + 1e-10 * (1.0 + q_prev.abs()) {
            state.pi = saved.0;
            state.theta = saved.1;
            warnings.push(format!(
                "outer iteration {r} raised the criterion; kept the previous iterate"
            ));
            converged = true;
            break;
        }
        outer_trace.push(q);
        let done = (q - q_prev).abs() / (q_prev + 1.0) < config.outer_tol;
        q_prev = q;
        if done {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!("outer loop hit its cap of {} iterations", config.max_outer));
    }
    state.refresh_zeta();
    state.outer_value = q_prev;

    let dist = state.copy_distances();
    let classification = classify_distances(&dist, config.classification_threshold);
    let pi_hat = (0..n)
        .map(|i| {
            let j = classification.assignment[i].unwrap_or_else(|| {
                (0..jn)
                    .min_by(|&a, &b| dist[(i, a)].total_cmp(&dist[(i, b)]))
                    .unwrap_or(0)
            });
            state.pi[j][i].clone()
        })
        .collect();
    if classification.num_unclassified() > 0 {
        warnings.push(format!(
            "{} firms left unclassified by the threshold rule",
            classification.num_unclassified()
        ));
    }
    let estimates = post_lasso(panel, &classification, spec, config.weighting, init)?;
    warnings.extend(estimates.warnings.iter().cloned());

    Ok(FitResult {
        config: config.clone(),
        spec: *spec,
        lambda,
        state,
        classification,
        pi_hat,
        estimates,
        outer_trace,
        inner_traces,
        converged,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::Vars;

    #[test]
    fn pgmm_penalty_and_limits() {
        let spec = MomentSpec::dynamic_panel(false);
        let rows = vec![LaggedRow {
            period: 1,
            cur: Vars { y: 1.0, k: 1.0, l: 0.0, m: 0.0, s: 0.0 },
            lag: Vars { y: 0.0, k: 0.0, l: 0.0, m: 0.0, s: 0.0 },
        }];
        // beta0 = 1, everything else 0 gives w = 0 on this row
        let pi = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let w = vec![WeightMatrix::identity(spec.num_moments())];
        let lags = vec![rows];
        let shifted = &pi + DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let v = pgmm_objective(&lags, &[pi.clone()], &[shifted.clone()], 0.5, &w, &spec).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        // pi on a center annihilates the penalty whatever the other centers
        let v = pgmm_objective(&lags, &[pi.clone()], &[shifted, pi.clone()], 1e6, &w, &spec).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn state_zeta() {
        let firm = vec![DVector::from_vec(vec![3.0, 4.0])];
        let s = CLassoState::initial(&firm, 3, 2);
        assert_eq!(s.zeta[0], vec![25.0, 25.0, 25.0]);
        let s1 = CLassoState::initial(&firm, 1, 2);
        assert_eq!(s1.zeta[0], vec![1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(CLassoConfig::with_groups(0).validate().is_err());
        let mut c = CLassoConfig::with_groups(2);
        c.lambda = Some(0.0);
        assert!(c.validate().is_err());
        let c: CLassoConfig = serde_json::from_str(r#"{"groups": 3, "weighting": "two_step"}"#).unwrap();
        assert_eq!(c.groups, 3);
        assert_eq!(c.weighting, WeightingScheme::TwoStep);
        assert!((default_lambda(16) - 0.5).abs() < 1e-15);
    }
}
