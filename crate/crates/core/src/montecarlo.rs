//! Monte Carlo harness over the simulation design: group-count selection
//! frequencies and classification/estimation accuracy of the Post-Lasso
//! estimator against the infeasible estimator on the true partition.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classo::{
    firm_estimates, fit_with, match_labels, post_lasso, CLassoConfig, Classification,
    GroupEstimates,
};
use crate::error::{Error, Result};
use crate::selection::{select_j, PenaltySpec};
use crate::simulate::{draw_panel, sim_spec, SimConfig};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McMode {
    Selection,
    Estimation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub replications: usize,
    pub sim: SimConfig,
    pub classo: CLassoConfig,
    pub penalties: Vec<PenaltySpec>,
    pub mode: McMode,
    /// Replication `r` simulates with seed `base_seed + r`.
    pub base_seed: u64,
    /// Candidate group counts in selection mode.
    pub j_values: Vec<usize>,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            replications: 20,
            sim: SimConfig::default(),
            classo: CLassoConfig::default(),
            penalties: vec![PenaltySpec::p1(0.5), PenaltySpec::p1(1.0), PenaltySpec::p2(0.25)],
            mode: McMode::Estimation,
            base_seed: 0,
            j_values: (1..=5).collect(),
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("at least one replication is required".into()));
        }
        self.sim.validate()?;
        self.classo.validate()?;
        if self.mode == McMode::Selection {
            if self.penalties.is_empty() {
                return Err(Error::Config("selection mode needs at least one penalty".into()));
            }
            for p in &self.penalties {
                p.validate()?;
            }
            if self.j_values.is_empty() || self.j_values.contains(&0) {
                return Err(Error::Config("group counts must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionStats {
    pub penalty: PenaltySpec,
    pub mean_j: f64,
    pub pr_equal: f64,
    pub pr_at_least: f64,
    /// Selected `J` per successful replication, in replication order.
    pub selected: Vec<usize>,
}

/// Firm-level relative statistics averaged over firms, in percent where
/// the name says so.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamStats {
    pub parameter: String,
    pub rel_bias_pct: f64,
    pub rel_sd_pct: f64,
    pub rel_rmse_pct: f64,
    /// Mean over firms of (mean standard error / standard deviation).
    pub se_sd: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorStats {
    pub estimator: String,
    pub accuracy: f64,
    pub params: Vec<ParamStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub accuracy: Option<f64>,
    /// Largest absolute difference between Post-Lasso and infeasible group
    /// estimates after relabeling.
    pub max_oracle_gap: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub mode: McMode,
    pub replications: usize,
    pub failed: usize,
    pub selection: Vec<SelectionStats>,
    pub estimation: Vec<EstimatorStats>,
    pub records: Vec<ReplicationRecord>,
    /// Aggregation conventions used.
    pub notes: Vec<String>,
}

impl McSummary {
    /// One row per penalty (selection) or per estimator and parameter
    /// (estimation).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        match self.mode {
            McMode::Selection => {
                w.write_record(["penalty", "r", "mean_J", "pr_equal", "pr_at_least", "replications", "failed"])?;
                for s in &self.selection {
                    let form = match s.penalty.form {
                        crate::selection::PenaltyForm::P1 => "p1",
                        crate::selection::PenaltyForm::P2 => "p2",
                    };
                    w.write_record([
                        form.to_string(),
                        s.penalty.r.to_string(),
                        s.mean_j.to_string(),
                        s.pr_equal.to_string(),
                        s.pr_at_least.to_string(),
                        self.replications.to_string(),
                        self.failed.to_string(),
                    ])?;
                }
            }
            McMode::Estimation => {
                w.write_record([
                    "estimator", "parameter", "accuracy", "rel_bias_pct", "rel_sd_pct",
                    "rel_rmse_pct", "se_sd", "coverage", "replications", "failed",
                ])?;
                for e in &self.estimation {
                    for p in &e.params {
                        w.write_record([
                            e.estimator.clone(),
                            p.parameter.clone(),
                            e.accuracy.to_string(),
                            p.rel_bias_pct.to_string(),
                            p.rel_sd_pct.to_string(),
                            p.rel_rmse_pct.to_string(),
                            p.se_sd.to_string(),
                            p.coverage.to_string(),
                            self.replications.to_string(),
                            self.failed.to_string(),
                        ])?;
                    }
                }
            }
        }
        w.flush().map_err(|e| Error::io("<summary>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Per-firm estimate and standard error of one parameter in one
/// replication; `None` for unclassified firms.
type FirmDraws = Vec<Option<(f64, f64)>>;

struct EstimationRep {
    accuracy: f64,
    gap: f64,
    /// `[estimator][parameter]`
    draws: Vec<Vec<FirmDraws>>,
}

/// Each firm gets the estimate of the group it was assigned to.
fn firm_draws(est: &GroupEstimates, classification: &Classification, index: usize) -> FirmDraws {
    classification
        .assignment
        .iter()
        .map(|a| {
            let g = est.get((*a)?)?;
            Some((g.theta[index], g.std_errors()[index]))
        })
        .collect()
}

const PARAMS: [(&str, &str); 2] = [("gamma", "beta3"), ("beta", "beta1")];

fn estimation_rep(cfg: &McConfig, seed: u64) -> Result<EstimationRep> {
    let sim = draw_panel(&SimConfig {
        seed,
        ..cfg.sim.clone()
    })?;
    let spec = sim_spec();
    let j0 = cfg.sim.groups.len();
    let config = CLassoConfig {
        groups: j0,
        ..cfg.classo.clone()
    };
    let init = firm_estimates(&sim.panel, &spec, config.weighting)?;
    let fit = fit_with(&sim.panel, &config, &spec, &init)?;
    let m = match_labels(&fit.classification, &sim.groups, j0)?;

    let truth = Classification::from_labels(&sim.groups, j0)?;
    let oracle = post_lasso(&sim.panel, &truth, &spec, config.weighting, &init)?;

    // gap between the two third-step estimates, group by group
    let mut gap: f64 = 0.0;
    for (e, &t) in m.permutation.iter().enumerate() {
        if let (Some(a), Some(b)) = (fit.estimates.get(e), oracle.get(t)) {
            gap = gap.max((&a.theta - &b.theta).amax());
        } else {
            gap = f64::INFINITY;
        }
    }

    let mut draws = Vec::new();
    for (est, cls) in [(&fit.estimates, &fit.classification), (&oracle, &truth)] {
        let per_param = PARAMS
            .iter()
            .map(|(_, name)| {
                let idx = spec
                    .index_of(name)
                    .ok_or_else(|| Error::Shape(format!("layout has no {name}")))?;
                Ok(firm_draws(est, cls, idx))
            })
            .collect::<Result<Vec<_>>>()?;
        draws.push(per_param);
    }
    Ok(EstimationRep {
        accuracy: m.accuracy,
        gap,
        draws,
    })
}

fn param_stats(name: &str, truth: &[f64], reps: &[&FirmDraws]) -> ParamStats {
    let n = truth.len();
    let (mut bias, mut sd, mut rmse, mut se_sd, mut cover) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut firms = 0usize;
    let mut ratio_firms = 0usize;
    for i in 0..n {
        let obs: Vec<(f64, f64)> = reps.iter().filter_map(|r| r[i]).collect();
        if obs.is_empty() {
            continue;
        }
        let k = obs.len() as f64;
        let t = truth[i];
        let mean = obs.iter().map(|o| o.0).sum::<f64>() / k;
        // population moments, so that rmse^2 = bias^2 + sd^2 per firm
        let var = obs.iter().map(|o| (o.0 - mean).powi(2)).sum::<f64>() / k;
        let mse = obs.iter().map(|o| (o.0 - t).powi(2)).sum::<f64>() / k;
        let mean_se = obs.iter().map(|o| o.1).sum::<f64>() / k;
        let hits = obs.iter().filter(|o| (o.0 - t).abs() <= Z95 * o.1).count() as f64;
        bias += (mean - t) / t;
        sd += var.sqrt() / t.abs();
        rmse += mse.sqrt() / t.abs();
        if var > 0.0 {
            se_sd += mean_se / var.sqrt();
            ratio_firms += 1;
        }
        cover += hits / k;
        firms += 1;
    }
    let f = firms.max(1) as f64;
    ParamStats {
        parameter: name.to_string(),
        rel_bias_pct: 100.0 * bias / f,
        rel_sd_pct: 100.0 * sd / f,
        rel_rmse_pct: 100.0 * rmse / f,
        se_sd: if ratio_firms > 0 {
            se_sd / ratio_firms as f64
        } else {
            f64::NAN
        },
        coverage: cover / f,
    }
}

/// Runs the replications, in parallel, and aggregates in replication order.
pub fn run(cfg: &McConfig) -> Result<McSummary> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.replications as u64)
        .map(|r| cfg.base_seed.wrapping_add(r))
        .collect();
    let j0 = cfg.sim.groups.len();
    let mut notes = vec![
        "relative statistics are computed per firm and averaged over firms".to_string(),
        "per-firm sd uses the 1/R denominator".to_string(),
    ];
    match cfg.mode {
        McMode::Selection => {
            let outcomes: Vec<Result<Vec<usize>>> = seeds
                .par_iter()
                .map(|&seed| {
                    let sim = draw_panel(&SimConfig {
                        seed,
                        ..cfg.sim.clone()
                    })?;
                    let spec = sim_spec();
                    let lambda = cfg.classo.lambda_for(&sim.panel);
                    let res = select_j(
                        &sim.panel,
                        lambda,
                        &cfg.j_values,
                        &cfg.penalties,
                        &spec,
                        &cfg.classo,
                        None,
                    )?;
                    res.selected
                        .iter()
                        .map(|s| {
                            s.as_ref().map(|s| s.groups).ok_or_else(|| {
                                Error::Numerical("every candidate fit failed".into())
                            })
                        })
                        .collect()
                })
                .collect();
            let mut records = Vec::new();
            let mut chosen: Vec<Vec<usize>> = vec![Vec::new(); cfg.penalties.len()];
            for (r, (out, &seed)) in outcomes.into_iter().zip(&seeds).enumerate() {
                let mut rec = ReplicationRecord {
                    replication: r,
                    seed,
                    accuracy: None,
                    max_oracle_gap: None,
                    error: None,
                };
                match out {
                    Ok(js) => {
                        for (k, j) in js.into_iter().enumerate() {
                            chosen[k].push(j);
                        }
                    }
                    Err(e) => rec.error = Some(e.to_string()),
                }
                records.push(rec);
            }
            let failed = records.iter().filter(|r| r.error.is_some()).count();
            let selection = cfg
                .penalties
                .iter()
                .zip(chosen)
                .map(|(p, js)| {
                    let k = js.len().max(1) as f64;
                    SelectionStats {
                        penalty: *p,
                        mean_j: js.iter().sum::<usize>() as f64 / k,
                        pr_equal: js.iter().filter(|&&j| j == j0).count() as f64 / k,
                        pr_at_least: js.iter().filter(|&&j| j >= j0).count() as f64 / k,
                        selected: js,
                    }
                })
                .collect();
            Ok(McSummary {
                mode: cfg.mode,
                replications: cfg.replications,
                failed,
                selection,
                estimation: Vec::new(),
                records,
                notes,
            })
        }
        McMode::Estimation => {
            let outcomes: Vec<Result<EstimationRep>> =
                seeds.par_iter().map(|&seed| estimation_rep(cfg, seed)).collect();
            let labels = cfg.sim.group_labels();
            let mut records = Vec::new();
            let mut ok = Vec::new();
            for (r, (out, &seed)) in outcomes.into_iter().zip(&seeds).enumerate() {
                let mut rec = ReplicationRecord {
                    replication: r,
                    seed,
                    accuracy: None,
                    max_oracle_gap: None,
                    error: None,
                };
                match out {
                    Ok(rep) => {
                        rec.accuracy = Some(rep.accuracy);
                        rec.max_oracle_gap = Some(rep.gap);
                        ok.push(rep);
                    }
                    Err(e) => rec.error = Some(e.to_string()),
                }
                records.push(rec);
            }
            let failed = records.iter().filter(|r| r.error.is_some()).count();
            let k = ok.len().max(1) as f64;
            let accuracy = ok.iter().map(|r| r.accuracy).sum::<f64>() / k;
            let truths: Vec<Vec<f64>> = vec![
                labels.iter().map(|&g| cfg.sim.groups[g].gamma).collect(),
                labels.iter().map(|&g| cfg.sim.groups[g].beta()).collect(),
            ];
            let estimation = ["post_lasso", "infeasible"]
                .iter()
                .enumerate()
                .map(|(e, name)| EstimatorStats {
                    estimator: name.to_string(),
                    accuracy: if e == 0 { accuracy } else { 1.0 },
                    params: PARAMS
                        .iter()
                        .enumerate()
                        .map(|(p, (label, _))| {
                            let reps: Vec<&FirmDraws> = ok.iter().map(|r| &r.draws[e][p]).collect();
                            param_stats(label, &truths[p], &reps)
                        })
                        .collect(),
                })
                .collect();
            notes.push("SE/SD is the mean over firms of per-firm ratios".into());
            Ok(McSummary {
                mode: cfg.mode,
                replications: cfg.replications,
                failed,
                selection: Vec::new(),
                estimation,
                records,
                notes,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_stats_by_hand() {
        // one firm, truth 0.5, draws 0.49 and 0.53 with se 0.01
        let a: FirmDraws = vec![Some((0.49, 0.01))];
        let b: FirmDraws = vec![Some((0.53, 0.01))];
        let s = param_stats("gamma", &[0.5], &[&a, &b]);
        assert!((s.rel_bias_pct - 2.0).abs() < 1e-10);
        assert!((s.rel_sd_pct - 4.0).abs() < 1e-10);
        let rmse = ((0.01f64.powi(2) + 0.03f64.powi(2)) / 2.0).sqrt() / 0.5 * 100.0;
        assert!((s.rel_rmse_pct - rmse).abs() < 1e-10);
        assert!((s.rel_rmse_pct.powi(2) - s.rel_bias_pct.powi(2) - s.rel_sd_pct.powi(2)).abs() < 1e-9);
        // sd of the draws is 0.02
        assert!((s.se_sd - 0.5).abs() < 1e-10);
        // |0.49-0.5| = 0.01 is covered, |0.53-0.5| = 0.03 is not
        assert!((s.coverage - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unclassified_draws_are_skipped() {
        let a: FirmDraws = vec![None, Some((1.0, 0.1))];
        let b: FirmDraws = vec![None, Some((1.0, 0.1))];
        let s = param_stats("beta", &[0.5, 1.0], &[&a, &b]);
        assert_eq!(s.rel_bias_pct, 0.0);
        assert_eq!(s.coverage, 1.0);
        assert!(s.se_sd.is_nan());
    }

    #[test]
    fn config_validation() {
        assert!(McConfig::default().validate().is_ok());
        let zero = McConfig {
            replications: 0,
            ..McConfig::default()
        };
        assert!(zero.validate().is_err());
        let json = r#"{"replications": 3, "mode": "selection", "penalties": [{"form": "p2", "r": 1.0}]}"#;
        let cfg: McConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.mode, McMode::Selection);
        assert_eq!(cfg.penalties, vec![PenaltySpec::p2(1.0)]);
    }
}
