//! Unpenalized GMM on each estimated group and clustered sandwich covariances.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use super::{Classification, FirmEstimates, WeightingScheme};
use crate::error::{Error, Result};
use crate::moments::{composite_residual, firm_avg_moments, invert_moment_covariance, MomentSpec, Strategy, WeightMatrix};
use crate::panel::{LaggedRow, PanelData};
use crate::solver::{minimize, minimize_multistart, GroupSystem, MomentSystem, SolveOptions};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Covariance {
    pub matrix: DMatrix<f64>,
    /// Set when `D'WD` was singular and a pseudo-inverse was used.
    pub pseudo_inverse: bool,
}

/// `(D'WD)^-1 D'W Omega W D (D'WD)^-1` with
/// `Omega = (1/n^2) sum_i gbar_i gbar_i'` over the `n` firms of the group.
pub fn sandwich_covariance(
    d: &DMatrix<f64>,
    w: &WeightMatrix,
    firm_moments: &[DVector<f64>],
) -> Covariance {
    let q = d.nrows();
    let n = firm_moments.len() as f64;
    let mut omega = DMatrix::zeros(q, q);
    for g in firm_moments {
        omega += g * g.transpose();
    }
    omega /= n * n;
    let dw = d.transpose() * w.matrix();
    let a = &dw * d;
    let a = (&a + a.transpose()) * 0.5;
    let scale = a.diagonal().max().max(f64::MIN_POSITIVE);
    let chol = a
        .clone()
        .cholesky()
        .filter(|ch| ch.l_dirty().diagonal().iter().all(|l| l * l > 1e-13 * scale));
    let (a_inv, pseudo_inverse) = match chol {
        Some(ch) => (ch.inverse(), false),
        None => {
            let eps = 1e-12 * a.abs().max().max(f64::MIN_POSITIVE);
            let pinv = a
                .clone()
                .pseudo_inverse(eps)
                .unwrap_or_else(|_| DMatrix::zeros(a.nrows(), a.ncols()));
            (pinv, true)
        }
    };
    let v = &a_inv * &dw * omega * dw.transpose() * &a_inv;
    Covariance {
        matrix: (&v + v.transpose()) * 0.5,
        pseudo_inverse,
    }
}

/// Clustered sandwich covariance of a group estimate.
pub fn sandwich_se(
    members: &[&[LaggedRow]],
    theta: &[f64],
    spec: &MomentSpec,
    w: &WeightMatrix,
) -> Result<Covariance> {
    if members.is_empty() {
        return Err(Error::Shape("group has no members".into()));
    }
    let sys = GroupSystem {
        firms: members.to_vec(),
        spec,
    };
    let (_, d) = sys.eval(theta)?;
    let gs = members
        .iter()
        .map(|rows| firm_avg_moments(rows, theta, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(sandwich_covariance(&d, w, &gs))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupEstimate {
    pub group: usize,
    /// Firm indices, ascending.
    pub members: Vec<usize>,
    pub theta: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub pseudo_inverse: bool,
    pub objective: f64,
    pub converged: bool,
    pub weight_fallback: bool,
    /// Composite residuals per member, aligned with `members`.
    #[serde(skip)]
    pub residuals: Vec<Vec<f64>>,
}

impl GroupEstimate {
    pub fn std_errors(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupEstimates {
    pub spec: MomentSpec,
    /// `None` for groups that were empty or under-identified.
    pub groups: Vec<Option<GroupEstimate>>,
    pub warnings: Vec<String>,
}

impl GroupEstimates {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn get(&self, group: usize) -> Option<&GroupEstimate> {
        self.groups.get(group).and_then(|g| g.as_ref())
    }

    /// Parameters of the group firm `i` belongs to.
    pub fn firm_theta(&self, classification: &Classification, i: usize) -> Option<&DVector<f64>> {
        classification.assignment[i]
            .and_then(|j| self.get(j))
            .map(|g| &g.theta)
    }

    /// Sum of squared composite residuals and the number of residuals.
    pub fn sum_squared_residuals(&self) -> (f64, usize) {
        let mut ssr = 0.0;
        let mut count = 0;
        for g in self.groups.iter().flatten() {
            for r in &g.residuals {
                ssr += r.iter().map(|e| e * e).sum::<f64>();
                count += r.len();
            }
        }
        (ssr, count)
    }

    /// Mean squared composite residual over all estimated groups.
    pub fn msr(&self) -> f64 {
        let (ssr, n) = self.sum_squared_residuals();
        ssr / n as f64
    }
}

/// Default starts that keep the share-equation parameters of `base` and
/// spread the productivity persistence over `0.2, 0.5, 0.8`. Firm-level
/// estimates of the remaining parameters are weakly identified and can
/// steer the group solve toward roots where persistence approaches one.
fn anchored_starts(base: &DVector<f64>, spec: &MomentSpec) -> Vec<DVector<f64>> {
    let mut anchor = spec.default_start();
    if spec.strategy() == Strategy::Gnr {
        for name in ["beta3", "E"] {
            if let Some(i) = spec.index_of(name) {
                anchor[i] = base[i];
            }
        }
    }
    let persistence = spec.index_of("delta1").or_else(|| spec.index_of("delta"));
    match persistence {
        Some(i) => [0.2, 0.5, 0.8]
            .iter()
            .map(|&d| {
                let mut s = anchor.clone();
                s[i] = d;
                s
            })
            .collect(),
        None => vec![anchor],
    }
}

pub fn coordinate_median(vs: &[&DVector<f64>]) -> DVector<f64> {
    let p = vs[0].len();
    DVector::from_iterator(
        p,
        (0..p).map(|k| {
            let mut col: Vec<f64> = vs.iter().map(|v| v[k]).collect();
            col.sort_by(f64::total_cmp);
            let m = col.len();
            if m % 2 == 1 {
                col[m / 2]
            } else {
                0.5 * (col[m / 2 - 1] + col[m / 2])
            }
        }),
    )
}

fn estimate_group(
    lags: &[Vec<LaggedRow>],
    group: usize,
    members: Vec<usize>,
    spec: &MomentSpec,
    weighting: WeightingScheme,
    init: &FirmEstimates,
) -> Result<GroupEstimate> {
    let p = spec.num_params();
    let rows: usize = members.iter().map(|&i| lags[i].len()).sum();
    if rows < p {
        return Err(Error::UnderIdentified {
            group: group + 1,
            rows,
            params: p,
        });
    }
    let firms: Vec<&[LaggedRow]> = members.iter().map(|&i| lags[i].as_slice()).collect();
    let sys = GroupSystem {
        firms: firms.clone(),
        spec,
    };
    // Starting points depend only on the member set.
    let member_theta: Vec<&DVector<f64>> = members.iter().map(|&i| &init.theta[i]).collect();
    let mut mean = DVector::zeros(p);
    for t in &member_theta {
        mean += *t;
    }
    mean /= member_theta.len() as f64;
    let median = coordinate_median(&member_theta);
    let mut starts = vec![mean, median.clone(), init.pooled.clone(), spec.default_start()];
    starts.extend(anchored_starts(&median, spec));
    let opts = SolveOptions::default();
    let ident = WeightMatrix::identity(spec.num_moments());
    let mut sol = minimize_multistart(&sys, &ident, None, &starts, &opts)?;
    let mut w = ident;
    let mut weight_fallback = false;
    if weighting == WeightingScheme::TwoStep {
        let gs = firms
            .iter()
            .map(|r| firm_avg_moments(r, sol.theta.as_slice(), spec))
            .collect::<Result<Vec<_>>>()?;
        let q = spec.num_moments();
        let mut omega = DMatrix::zeros(q, q);
        for g in &gs {
            omega += g * g.transpose();
        }
        omega /= gs.len() as f64;
        let wt = invert_moment_covariance(&omega);
        weight_fallback = wt.fell_back;
        w = wt.matrix;
        sol = minimize(&sys, &w, None, &sol.theta, &opts)?;
    }
    let cov = sandwich_se(&firms, sol.theta.as_slice(), spec, &w)?;
    let residuals = firms
        .iter()
        .map(|rows| {
            rows.iter()
                .map(|r| composite_residual(r, sol.theta.as_slice(), spec))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupEstimate {
        group,
        members,
        theta: sol.theta,
        covariance: cov.matrix,
        pseudo_inverse: cov.pseudo_inverse,
        objective: sol.value,
        converged: sol.converged,
        weight_fallback,
        residuals,
    })
}

/// GMM on the group-averaged firm moments of every estimated group.
/// Unclassified firms are left out; empty and under-identified groups are
/// skipped with a warning.
pub fn post_lasso(
    panel: &PanelData,
    classification: &Classification,
    spec: &MomentSpec,
    weighting: WeightingScheme,
    init: &FirmEstimates,
) -> Result<GroupEstimates> {
    let n = panel.num_firms();
    if classification.num_firms() != n || init.theta.len() != n {
        return Err(Error::Shape(
            "classification, firm estimates and panel cover different firms".into(),
        ));
    }
    let lags = panel.build_lags();
    let results: Vec<Result<Option<GroupEstimate>>> = (0..classification.groups)
        .into_par_iter()
        .map(|j| {
            let members = classification.members(j);
            if members.is_empty() {
                return Ok(None);
            }
            estimate_group(&lags, j, members, spec, weighting, init).map(Some)
        })
        .collect();
    let mut groups = Vec::with_capacity(results.len());
    let mut warnings = Vec::new();
    for (j, r) in results.into_iter().enumerate() {
        match r {
            Ok(Some(g)) => {
                if g.pseudo_inverse {
                    warnings.push(format!(
                        "group {}: singular Jacobian, covariance uses a pseudo-inverse",
                        j + 1
                    ));
                }
                groups.push(Some(g));
            }
            Ok(None) => {
                warnings.push(format!("group {} is empty and was skipped", j + 1));
                groups.push(None);
            }
            Err(e @ Error::UnderIdentified { .. }) => {
                warnings.push(format!("{e}; group skipped"));
                groups.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    if groups.iter().all(|g| g.is_none()) {
        return Err(Error::Numerical("no group could be estimated".into()));
    }
    Ok(GroupEstimates {
        spec: *spec,
        groups,
        warnings,
    })
}
