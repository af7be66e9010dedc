//! Outputs of the empirical pipeline: persisted fits, composite residuals,
//! fit comparisons by mean squared residual, TFP levels, and crosstabs of
//! estimated groups against ex-ante labels.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::classo::{Classification, GroupEstimates};
use crate::error::{Error, Result};
use crate::moments::{composite_residual, MomentSpec};
use crate::panel::{Observation, PanelData};
use crate::simulate::{draw_panel, SimConfig, SimulatedPanel};

/// Self-contained description of a fitted grouping: the layout, the
/// assignment of every firm and the parameters of every group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub spec: MomentSpec,
    pub lambda: Option<f64>,
    pub groups: usize,
    pub firms: Vec<String>,
    /// 0-based group per firm; `None` for unclassified firms.
    pub assignment: Vec<Option<usize>>,
    /// Parameters per group; `None` where estimation was skipped.
    pub theta: Vec<Option<Vec<f64>>>,
    pub std_errors: Vec<Option<Vec<f64>>>,
}

impl FitRecord {
    pub fn new(
        panel: &PanelData,
        lambda: Option<f64>,
        classification: &Classification,
        estimates: &GroupEstimates,
    ) -> Result<Self> {
        if classification.num_firms() != panel.num_firms() {
            return Err(Error::Shape("classification does not cover the panel".into()));
        }
        Ok(Self {
            spec: estimates.spec,
            lambda,
            groups: classification.groups,
            firms: panel.firms().iter().map(|f| f.id.clone()).collect(),
            assignment: classification.assignment.clone(),
            theta: estimates
                .groups
                .iter()
                .map(|g| g.as_ref().map(|g| g.theta.as_slice().to_vec()))
                .collect(),
            std_errors: estimates
                .groups
                .iter()
                .map(|g| g.as_ref().map(|g| g.std_errors().as_slice().to_vec()))
                .collect(),
        })
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rec: Self = serde_json::from_str(&text)?;
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.spec.num_params();
        if self.assignment.len() != self.firms.len() {
            return Err(Error::Shape("assignment and firm list differ in length".into()));
        }
        if self.theta.len() != self.groups {
            return Err(Error::Shape("one parameter vector per group is required".into()));
        }
        if self.assignment.iter().flatten().any(|&g| g >= self.groups) {
            return Err(Error::Shape("assignment refers to a missing group".into()));
        }
        if self.theta.iter().flatten().any(|t| t.len() != p) {
            return Err(Error::Shape(format!("group parameters must have length {p}")));
        }
        Ok(())
    }

    /// Parameters of every firm, `None` when unclassified or when its group
    /// has no estimate. Firms are matched to the panel by id.
    fn firm_params<'a>(&'a self, panel: &PanelData) -> Result<Vec<Option<&'a [f64]>>> {
        let index: HashMap<&str, usize> = self
            .firms
            .iter()
            .enumerate()
            .map(|(i, f)| (f.as_str(), i))
            .collect();
        panel
            .firms()
            .iter()
            .map(|f| {
                let &i = index.get(f.id.as_str()).ok_or_else(|| {
                    Error::Shape(format!("firm {} is missing from the fit", f.id))
                })?;
                Ok(self.assignment[i].and_then(|g| self.theta[g].as_deref()))
            })
            .collect()
    }

    /// Number of estimated parameters, `P` times the estimated groups.
    pub fn num_parameters(&self) -> usize {
        self.theta.iter().flatten().count() * self.spec.num_params()
    }

    pub fn write_assignment_csv<W: Write>(&self, writer: W, labels: Option<(&str, &[String])>) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["firm", "group"];
        if let Some((name, _)) = labels {
            header.push(name);
        }
        w.write_record(&header)?;
        for (i, (f, a)) in self.firms.iter().zip(&self.assignment).enumerate() {
            let mut rec = vec![f.clone(), a.map(|g| (g + 1).to_string()).unwrap_or_default()];
            if let Some((_, l)) = labels {
                rec.push(l[i].clone());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<assignment>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualRow {
    pub firm: String,
    pub period: i64,
    pub group: usize,
    pub residual: f64,
}

/// Composite residuals of every classified firm-period.
pub fn residuals(panel: &PanelData, record: &FitRecord) -> Result<Vec<ResidualRow>> {
    let params = record.firm_params(panel)?;
    let lags = panel.build_lags();
    let index: HashMap<&str, usize> = record.firms.iter().enumerate().map(|(i, f)| (f.as_str(), i)).collect();
    let mut out = Vec::new();
    for ((firm, rows), theta) in panel.firms().iter().zip(&lags).zip(params) {
        let Some(theta) = theta else { continue };
        let group = record.assignment[index[firm.id.as_str()]].expect("classified");
        for row in rows {
            out.push(ResidualRow {
                firm: firm.id.clone(),
                period: row.period,
                group: group + 1,
                residual: composite_residual(row, theta, &record.spec)?,
            });
        }
    }
    Ok(out)
}

pub fn write_residuals_csv<W: Write>(writer: W, rows: &[ResidualRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<residuals>", e))?;
    Ok(())
}

/// Mean squared composite residual and the number of residuals.
pub fn mean_squared_residual(panel: &PanelData, record: &FitRecord) -> Result<(f64, usize)> {
    let rows = residuals(panel, record)?;
    if rows.is_empty() {
        return Err(Error::Numerical("fit classifies no firm".into()));
    }
    let ssr: f64 = rows.iter().map(|r| r.residual * r.residual).sum();
    Ok((ssr / rows.len() as f64, rows.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub name: String,
    pub msr: f64,
    pub residuals: usize,
    pub groups: usize,
    pub parameters: usize,
}

/// Mean squared residuals of two fits of the same panel.
pub fn compare_fits(
    panel: &PanelData,
    a: (&str, &FitRecord),
    b: (&str, &FitRecord),
) -> Result<[FitSummary; 2]> {
    if a.1.spec != b.1.spec {
        return Err(Error::Config("fits use different moment layouts".into()));
    }
    let summary = |(name, rec): (&str, &FitRecord)| -> Result<FitSummary> {
        let (msr, residuals) = mean_squared_residual(panel, rec)?;
        Ok(FitSummary {
            name: name.to_string(),
            msr,
            residuals,
            groups: rec.groups,
            parameters: rec.num_parameters(),
        })
    };
    Ok([summary(a)?, summary(b)?])
}

pub fn write_comparison_csv<W: Write>(writer: W, fits: &[FitSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for f in fits {
        w.serialize(f)?;
    }
    w.flush().map_err(|e| Error::io("<comparison>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TfpRow {
    pub firm: String,
    pub period: i64,
    pub group: usize,
    pub tfp: f64,
}

/// `exp(y - b1 k - b2 l - b3 m)` on every observation of a classified
/// firm, with the elasticities of the firm's group. The intercept stays
/// inside the level.
pub fn tfp_levels(panel: &PanelData, record: &FitRecord) -> Result<Vec<TfpRow>> {
    let params = record.firm_params(panel)?;
    let (b1, b2, b3) = record.spec.elasticity_indices();
    let index: HashMap<&str, usize> = record.firms.iter().enumerate().map(|(i, f)| (f.as_str(), i)).collect();
    let mut out = Vec::new();
    for (firm, theta) in panel.firms().iter().zip(params) {
        let Some(th) = theta else { continue };
        let group = record.assignment[index[firm.id.as_str()]].expect("classified");
        for (t, v) in firm.vars.iter().enumerate() {
            let mut log = v.y - th[b1] * v.k;
            if let Some(i) = b2 {
                log -= th[i] * v.l;
            }
            if let Some(i) = b3 {
                log -= th[i] * v.m;
            }
            out.push(TfpRow {
                firm: firm.id.clone(),
                period: firm.first_period + t as i64,
                group: group + 1,
                tfp: log.exp(),
            });
        }
    }
    Ok(out)
}

pub fn write_tfp_csv<W: Write>(writer: W, rows: &[TfpRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<tfp>", e))?;
    Ok(())
}

/// Counts of classified firms by (ex-ante label, estimated group).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Crosstab {
    pub labels: Vec<String>,
    pub groups: usize,
    /// `counts[label][group]`
    pub counts: Vec<Vec<usize>>,
}

impl Crosstab {
    pub fn row_totals(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn column_totals(&self) -> Vec<usize> {
        (0..self.groups)
            .map(|g| self.counts.iter().map(|r| r[g]).sum())
            .collect()
    }

    pub fn total(&self) -> usize {
        self.row_totals().iter().sum()
    }

    /// Number of groups with at least one firm, per label.
    pub fn groups_per_label(&self) -> Vec<usize> {
        self.counts
            .iter()
            .map(|r| r.iter().filter(|&&c| c > 0).count())
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["label".to_string()];
        header.extend((1..=self.groups).map(|g| format!("group{g}")));
        header.push("total".into());
        w.write_record(&header)?;
        for (label, (row, tot)) in self.labels.iter().zip(self.counts.iter().zip(self.row_totals())) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|c| c.to_string()));
            rec.push(tot.to_string());
            w.write_record(&rec)?;
        }
        let mut rec = vec!["total".to_string()];
        rec.extend(self.column_totals().iter().map(|c| c.to_string()));
        rec.push(self.total().to_string());
        w.write_record(&rec)?;
        w.flush().map_err(|e| Error::io("<crosstab>", e))?;
        Ok(())
    }
}

/// Sorts numerically when every label is a number, otherwise lexically.
fn sort_labels(labels: &mut [String]) {
    let numeric: Option<Vec<f64>> = labels.iter().map(|l| l.parse::<f64>().ok()).collect();
    if numeric.is_some() {
        labels.sort_by(|a, b| {
            a.parse::<f64>()
                .unwrap()
                .total_cmp(&b.parse::<f64>().unwrap())
        });
    } else {
        labels.sort();
    }
}

/// Unclassified firms are left out.
pub fn crosstab(labels: &[String], assignment: &[Option<usize>], groups: usize) -> Result<Crosstab> {
    if labels.len() != assignment.len() {
        return Err(Error::Shape("labels and assignment differ in length".into()));
    }
    let mut distinct: Vec<String> = labels.to_vec();
    distinct.sort();
    distinct.dedup();
    sort_labels(&mut distinct);
    let pos: HashMap<&str, usize> = distinct.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut counts = vec![vec![0; groups]; distinct.len()];
    for (l, a) in labels.iter().zip(assignment) {
        if let Some(g) = a {
            if *g >= groups {
                return Err(Error::Shape(format!("group {} out of range", g + 1)));
            }
            counts[pos[l.as_str()]][*g] += 1;
        }
    }
    Ok(Crosstab {
        labels: distinct,
        groups,
        counts,
    })
}

/// Reads `firm`, `group` and a label column from an assignment CSV. Empty
/// groups mean unclassified; groups are 1-based in the file.
pub fn read_assignment_csv(path: impl AsRef<Path>, label: &str) -> Result<(Vec<String>, Vec<Option<usize>>, usize)> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{} has no column '{name}'", path.display())))
    };
    let (gi, li) = (col("group")?, col(label)?);
    let mut labels = Vec::new();
    let mut assignment = Vec::new();
    let mut groups = 0;
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        labels.push(rec[li].to_string());
        let g = rec[gi].trim();
        if g.is_empty() {
            assignment.push(None);
        } else {
            let g: usize = g.parse().map_err(|_| Error::Parse {
                row: row + 2,
                msg: format!("group '{g}' is not a positive integer"),
            })?;
            if g == 0 {
                return Err(Error::Parse {
                    row: row + 2,
                    msg: "groups are numbered from 1".into(),
                });
            }
            groups = groups.max(g);
            assignment.push(Some(g - 1));
        }
    }
    Ok((labels, assignment, groups))
}

/// Per-firm value of an extra panel column, which must be constant within
/// each firm. Whole numbers are rendered without a fractional part.
pub fn firm_labels(panel: &PanelData, column: &str) -> Result<Vec<String>> {
    let c = panel
        .extra_index(column)
        .ok_or_else(|| Error::Schema(format!("panel has no column '{column}'")))?;
    panel
        .firms()
        .iter()
        .map(|f| {
            let v = f.extra[0][c];
            if f.extra.iter().any(|e| e[c] != v) {
                return Err(Error::Domain(format!(
                    "column '{column}' varies within firm {}",
                    f.id
                )));
            }
            Ok(if v.fract() == 0.0 && v.abs() < 1e15 {
                format!("{}", v as i64)
            } else {
                v.to_string()
            })
        })
        .collect()
}

/// Labels as 0-based classes, in sorted label order.
pub fn label_classes(labels: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut distinct: Vec<String> = labels.to_vec();
    distinct.sort();
    distinct.dedup();
    sort_labels(&mut distinct);
    let pos: HashMap<&str, usize> = distinct.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    (labels.iter().map(|l| pos[l.as_str()]).collect(), distinct)
}

/// A simulated panel in the shape of a plant-level census: Table-1 groups
/// plus an `industry` column drawn independently of the group, so every
/// industry mixes technologies.
pub fn industry_mimic(config: &SimConfig, industries: usize) -> Result<SimulatedPanel> {
    if industries == 0 {
        return Err(Error::Config("at least one industry is required".into()));
    }
    let sim = draw_panel(config)?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let codes: Vec<f64> = (0..sim.panel.num_firms())
        .map(|_| (rng.gen_range(0..industries) + 1) as f64)
        .collect();
    let mut obs = Vec::with_capacity(sim.panel.num_observations());
    for (f, &code) in sim.panel.firms().iter().zip(&codes) {
        for (t, v) in f.vars.iter().enumerate() {
            let mut extra = f.extra[t].clone();
            extra.push(code);
            obs.push(Observation {
                firm_id: f.id.clone(),
                period: f.first_period + t as i64,
                vars: *v,
                extra,
            });
        }
    }
    let mut names = sim.panel.extra_names().to_vec();
    names.push("industry".into());
    let panel = PanelData::from_observations(obs, names, sim.panel.prices_normalized(), sim.panel.has_labor())?;
    Ok(SimulatedPanel { panel, ..sim })
}
