//! Information criteria over fitted models and selection of the number of
//! groups and of the penalty level.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classo::{fit_with, firm_estimates, CLassoConfig, FirmEstimates, GroupEstimates};
use crate::error::{Error, Result};
use crate::moments::MomentSpec;
use crate::panel::PanelData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyForm {
    /// `r (NT)^-1/2`
    P1,
    /// `r log(log T) / T`
    P2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySpec {
    pub form: PenaltyForm,
    pub r: f64,
}

impl PenaltySpec {
    pub fn p1(r: f64) -> Self {
        Self {
            form: PenaltyForm::P1,
            r,
        }
    }

    pub fn p2(r: f64) -> Self {
        Self {
            form: PenaltyForm::P2,
            r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::Config(format!(
                "penalty factor r must be positive, got {}",
                self.r
            )));
        }
        Ok(())
    }

    /// Penalty per parameter and group. `t` may be fractional for
    /// unbalanced panels.
    pub fn value(&self, n: f64, t: f64) -> f64 {
        match self.form {
            PenaltyForm::P1 => self.r / (n * t).sqrt(),
            PenaltyForm::P2 => self.r * t.ln().ln() / t,
        }
    }

    pub fn label(&self) -> String {
        let f = match self.form {
            PenaltyForm::P1 => "p1",
            PenaltyForm::P2 => "p2",
        };
        format!("{f}(r={})", self.r)
    }
}

/// Criterion value. `degenerate` marks a zero residual sum of squares, for
/// which the value is `-inf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IcValue {
    pub value: f64,
    pub msr: f64,
    pub degenerate: bool,
}

/// `log(MSR) + J P p(N, T)` where MSR averages the squared composite
/// residuals of all classified firm-periods and `J` counts the fitted
/// groups.
pub fn information_criterion(
    est: &GroupEstimates,
    n: f64,
    t: f64,
    p: usize,
    penalty: &PenaltySpec,
) -> Result<IcValue> {
    let (ssr, count) = est.sum_squared_residuals();
    if count == 0 {
        return Err(Error::Numerical("no residuals to evaluate".into()));
    }
    Ok(ic_from_msr(ssr / count as f64, est.num_groups(), n, t, p, penalty))
}

pub fn ic_from_msr(msr: f64, groups: usize, n: f64, t: f64, p: usize, penalty: &PenaltySpec) -> IcValue {
    let pen = (groups * p) as f64 * penalty.value(n, t);
    if msr == 0.0 {
        IcValue {
            value: f64::NEG_INFINITY,
            msr,
            degenerate: true,
        }
    } else {
        IcValue {
            value: msr.ln() + pen,
            msr,
            degenerate: false,
        }
    }
}

/// `N` and `T` entering the penalties: firms, and usable periods per firm
/// on average, so that `NT` is the number of residuals of a full
/// classification.
pub fn panel_dims(panel: &PanelData) -> (f64, f64) {
    let n = panel.num_firms() as f64;
    (n, panel.num_usable() as f64 / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionGrid {
    pub j_values: Vec<usize>,
    /// Exponents `a` of `lambda = T^-a`.
    pub a_values: Vec<f64>,
    /// Known upper bound on the number of groups.
    pub j_max: Option<usize>,
}

impl Default for SelectionGrid {
    fn default() -> Self {
        Self {
            j_values: (1..=5).collect(),
            a_values: vec![0.25],
            j_max: None,
        }
    }
}

impl SelectionGrid {
    pub fn validate(&self) -> Result<()> {
        if self.j_values.is_empty() || self.a_values.is_empty() {
            return Err(Error::Config("selection grids must be non-empty".into()));
        }
        if self.j_values.contains(&0) {
            return Err(Error::Config("group counts must be at least 1".into()));
        }
        if let Some(&a) = self.a_values.iter().find(|a| !(**a > 0.0 && **a < 0.5)) {
            return Err(Error::Config(format!("exponent a = {a} is outside (0, 0.5)")));
        }
        if let (Some(jm), Some(&top)) = (self.j_max, self.j_values.iter().max()) {
            if top > jm {
                return Err(Error::Config(format!(
                    "J = {top} exceeds the upper bound {jm}"
                )));
            }
        }
        Ok(())
    }
}

/// One fitted `(lambda, J)` combination.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    /// Exponent behind `lambda`, if the point came from an `a` grid.
    pub a: Option<f64>,
    pub lambda: f64,
    pub groups: usize,
    pub msr: f64,
    /// One value per penalty; empty when the fit failed.
    pub ic: Vec<f64>,
    pub degenerate: bool,
    pub converged: bool,
    pub unclassified: usize,
    pub error: Option<String>,
}

impl GridPoint {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selected {
    pub penalty: PenaltySpec,
    pub a: Option<f64>,
    pub lambda: f64,
    pub groups: usize,
    pub ic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResult {
    pub penalties: Vec<PenaltySpec>,
    /// Grid points in `a`-major, then `J`, order.
    pub points: Vec<GridPoint>,
    /// Choice per penalty; `None` if every fit failed.
    pub selected: Vec<Option<Selected>>,
    pub warnings: Vec<String>,
}

impl SelectionResult {
    /// Writes the surface with columns `a, lambda, J, IC1.., msr, converged`.
    pub fn write_surface_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["a".to_string(), "lambda".into(), "J".into()];
        header.extend((1..=self.penalties.len()).map(|k| format!("IC{k}")));
        header.extend(["msr".to_string(), "converged".into()]);
        w.write_record(&header)?;
        for pt in &self.points {
            let mut rec = vec![
                pt.a.map(|a| a.to_string()).unwrap_or_default(),
                pt.lambda.to_string(),
                pt.groups.to_string(),
            ];
            if pt.failed() {
                rec.extend(std::iter::repeat(String::new()).take(self.penalties.len() + 1));
            } else {
                rec.extend(pt.ic.iter().map(|v| v.to_string()));
                rec.push(pt.msr.to_string());
            }
            rec.push(pt.converged.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<surface>", e))?;
        Ok(())
    }

    pub fn save_surface_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_surface_csv(std::io::BufWriter::new(file))
    }
}

fn fit_point(
    panel: &PanelData,
    base: &CLassoConfig,
    spec: &MomentSpec,
    init: &FirmEstimates,
    a: Option<f64>,
    lambda: f64,
    groups: usize,
    penalties: &[PenaltySpec],
) -> GridPoint {
    let (n, t) = panel_dims(panel);
    let config = CLassoConfig {
        groups,
        lambda: Some(lambda),
        ..base.clone()
    };
    let mut pt = GridPoint {
        a,
        lambda,
        groups,
        msr: f64::NAN,
        ic: Vec::new(),
        degenerate: false,
        converged: false,
        unclassified: 0,
        error: None,
    };
    let fitted = fit_with(panel, &config, spec, init).and_then(|f| {
        let (ssr, count) = f.estimates.sum_squared_residuals();
        if count == 0 {
            Err(Error::Numerical("no residuals to evaluate".into()))
        } else {
            Ok((f, ssr / count as f64))
        }
    });
    match fitted {
        Ok((f, msr)) => {
            pt.msr = msr;
            pt.converged = f.converged;
            pt.unclassified = f.classification.num_unclassified();
            for pen in penalties {
                let v = ic_from_msr(msr, groups, n, t, spec.num_params(), pen);
                pt.degenerate |= v.degenerate;
                pt.ic.push(v.value);
            }
        }
        Err(e) => pt.error = Some(e.to_string()),
    }
    pt
}

/// Minimizer over non-failed points in grid order; earlier points win ties.
fn argmin<'a>(points: impl Iterator<Item = &'a GridPoint>, k: usize) -> Option<&'a GridPoint> {
    let mut best: Option<&GridPoint> = None;
    for pt in points.filter(|p| !p.failed()) {
        if best.map_or(true, |b| pt.ic[k] < b.ic[k]) {
            best = Some(pt);
        }
    }
    best
}

fn run_grid(
    panel: &PanelData,
    lambdas: &[(Option<f64>, f64)],
    j_values: &[usize],
    penalties: &[PenaltySpec],
    spec: &MomentSpec,
    base: &CLassoConfig,
    init: Option<&FirmEstimates>,
) -> Result<SelectionResult> {
    if penalties.is_empty() {
        return Err(Error::Config("at least one penalty is required".into()));
    }
    for pen in penalties {
        pen.validate()?;
    }
    let owned;
    let init = match init {
        Some(i) => i,
        None => {
            owned = firm_estimates(panel, spec, base.weighting)?;
            &owned
        }
    };
    let mut js = j_values.to_vec();
    js.sort_unstable();
    js.dedup();
    let cells: Vec<(Option<f64>, f64, usize)> = lambdas
        .iter()
        .flat_map(|&(a, l)| js.iter().map(move |&j| (a, l, j)))
        .collect();
    let points: Vec<GridPoint> = cells
        .par_iter()
        .map(|&(a, l, j)| fit_point(panel, base, spec, init, a, l, j, penalties))
        .collect();

    let mut warnings = Vec::new();
    for pt in points.iter().filter(|p| p.failed()) {
        warnings.push(format!(
            "fit with J = {} and lambda = {} failed and is excluded: {}",
            pt.groups,
            pt.lambda,
            pt.error.as_deref().unwrap_or_default()
        ));
    }
    if points.iter().any(|p| p.unclassified > 0) {
        warnings.push(
            "unclassified firms are excluded from the residual average".into(),
        );
    }
    if points.iter().any(|p| p.degenerate) {
        warnings.push("zero residual sum of squares; criterion set to -inf".into());
    }

    let per_lambda = js.len();
    let selected = (0..penalties.len())
        .map(|k| {
            // best J for each lambda, then best lambda
            let best_per_lambda = points
                .chunks(per_lambda)
                .filter_map(|chunk| argmin(chunk.iter(), k));
            argmin(best_per_lambda, k).map(|pt| Selected {
                penalty: penalties[k],
                a: pt.a,
                lambda: pt.lambda,
                groups: pt.groups,
                ic: pt.ic[k],
            })
        })
        .collect();
    Ok(SelectionResult {
        penalties: penalties.to_vec(),
        points,
        selected,
        warnings,
    })
}

/// Fits every `J` in `j_values` at a fixed `lambda` and picks the
/// criterion minimizer for each penalty; ties go to the smallest `J`.
/// Failed fits are excluded with a warning. Firm-wise estimates are
/// computed once unless supplied.
pub fn select_j(
    panel: &PanelData,
    lambda: f64,
    j_values: &[usize],
    penalties: &[PenaltySpec],
    spec: &MomentSpec,
    base: &CLassoConfig,
    init: Option<&FirmEstimates>,
) -> Result<SelectionResult> {
    if j_values.is_empty() || j_values.contains(&0) {
        return Err(Error::Config(
            "group counts must be a non-empty list of positive integers".into(),
        ));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    run_grid(panel, &[(None, lambda)], j_values, penalties, spec, base, init)
}

/// Criterion over the full `(lambda, J)` grid with `lambda = T^-a`; the
/// selected pair minimizes `IC(J(lambda), lambda)`. Ties go to the smaller
/// `J`, then to the earlier `a` in the grid.
pub fn select_joint(
    panel: &PanelData,
    grid: &SelectionGrid,
    penalties: &[PenaltySpec],
    spec: &MomentSpec,
    base: &CLassoConfig,
    init: Option<&FirmEstimates>,
) -> Result<SelectionResult> {
    grid.validate()?;
    let t = panel.max_usable() as f64;
    let lambdas: Vec<(Option<f64>, f64)> = grid.a_values.iter().map(|&a| (Some(a), t.powf(-a))).collect();
    run_grid(panel, &lambdas, &grid.j_values, penalties, spec, base, init)
}
