//! Panels from a dynamic firm model with latent technology groups.
//!
//! Firms produce `Y = K^beta M^gamma exp(omega + eps)` with constant
//! returns, choose intermediates from the static first-order condition and
//! investment from a closed-form Euler-equation series, accumulate capital
//! as `K_t = (1 - d) K_{t-1} + I_{t-1}` from `K_0 = 0`, and see productivity
//! follow `omega_t = alpha + delta omega_{t-1} + eta_t`. A burn-in is
//! simulated and discarded so that kept periods come from the steady state.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{MomentSpec, ParamVector};
use crate::panel::{Observation, PanelData, Vars};

/// Technology and productivity parameters of one latent group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupParams {
    /// Share of firms in the group.
    pub share: f64,
    /// Intermediate-input elasticity; capital gets `1 - gamma`.
    pub gamma: f64,
    pub sigma_eps: f64,
    pub alpha: f64,
    pub delta: f64,
    pub sigma_eta: f64,
}

impl GroupParams {
    pub fn beta(&self) -> f64 {
        1.0 - self.gamma
    }

    /// `E[exp(eps)] = exp(sigma_eps^2 / 2)`.
    pub fn e_factor(&self) -> f64 {
        (0.5 * self.sigma_eps * self.sigma_eps).exp()
    }

    pub fn stationary_mean(&self) -> f64 {
        self.alpha / (1.0 - self.delta)
    }

    pub fn stationary_var(&self) -> f64 {
        self.sigma_eta * self.sigma_eta / (1.0 - self.delta * self.delta)
    }

    fn validate(&self, j: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("group {}: {what}", j + 1)));
        if !(self.share > 0.0 && self.share < 1.0) && self.share != 1.0 {
            return bad("share must lie in (0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.delta.abs() < 1.0) {
            return bad("|delta| must be below 1");
        }
        if !(self.sigma_eps >= 0.0 && self.sigma_eta >= 0.0) || !self.alpha.is_finite() {
            return bad("standard deviations must be non-negative and alpha finite");
        }
        Ok(())
    }
}

/// The three-group design: shares 0.3/0.4/0.3 and increasing
/// intermediate elasticities.
pub fn default_groups() -> Vec<GroupParams> {
    vec![
        GroupParams {
            share: 0.30,
            gamma: 0.35,
            sigma_eps: 0.02,
            alpha: 0.00,
            delta: 0.90,
            sigma_eta: 0.01,
        },
        GroupParams {
            share: 0.40,
            gamma: 0.50,
            sigma_eps: 0.04,
            alpha: 0.20,
            delta: 0.80,
            sigma_eta: 0.01,
        },
        GroupParams {
            share: 0.30,
            gamma: 0.65,
            sigma_eps: 0.02,
            alpha: 0.40,
            delta: 0.70,
            sigma_eta: 0.01,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub groups: Vec<GroupParams>,
    /// Discount factor.
    pub b: f64,
    /// Depreciation rate.
    pub d: f64,
    pub n: usize,
    /// Usable periods per firm; `T + 1` periods are emitted.
    pub t: usize,
    pub burn_in: usize,
    pub series_terms: usize,
    pub seed: u64,
    /// Shift of the initial productivity draw away from its stationary
    /// mean. Zero for the standard design; nonzero values with a short
    /// burn-in give transient paths for noiseless fixtures.
    pub initial_omega_offset: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            groups: default_groups(),
            b: 0.985,
            d: 0.100,
            n: 200,
            t: 25,
            burn_in: 1000,
            series_terms: 1001,
            seed: 0,
            initial_omega_offset: 0.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Config("at least one group is required".into()));
        }
        for (j, g) in self.groups.iter().enumerate() {
            g.validate(j)?;
        }
        let total: f64 = self.groups.iter().map(|g| g.share).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("group shares sum to {total}, not 1")));
        }
        if !(self.b > 0.0 && self.b < 1.0) || !(self.d > 0.0 && self.d < 1.0) {
            return Err(Error::Config("b and d must lie in (0, 1)".into()));
        }
        if !(self.b * (1.0 - self.d) < 1.0) {
            return Err(Error::Config("investment series diverges: b (1 - d) >= 1".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        if self.t < 2 {
            return Err(Error::Config("t must be at least 2".into()));
        }
        if self.burn_in == 0 {
            return Err(Error::Config(
                "burn_in must be at least 1 because capital starts at zero".into(),
            ));
        }
        if self.series_terms == 0 {
            return Err(Error::Config("series_terms must be positive".into()));
        }
        if !self.initial_omega_offset.is_finite() {
            return Err(Error::Config("initial_omega_offset must be finite".into()));
        }
        Ok(())
    }

    /// Firms per group by largest-remainder apportionment of the shares.
    pub fn group_sizes(&self) -> Vec<usize> {
        let quotas: Vec<f64> = self.groups.iter().map(|g| g.share * self.n as f64).collect();
        let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let assigned: usize = sizes.iter().sum();
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        // stable sort keeps the lower index first on equal remainders
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.total_cmp(&ra)
        });
        for &j in order.iter().take(self.n.saturating_sub(assigned)) {
            sizes[j] += 1;
        }
        sizes
    }

    /// Group of every firm: contiguous blocks in group order.
    pub fn group_labels(&self) -> Vec<usize> {
        self.group_sizes()
            .iter()
            .enumerate()
            .flat_map(|(j, &s)| std::iter::repeat(j).take(s))
            .collect()
    }
}

/// Moment layout matching the simulated design: two inputs and an AR(1)
/// productivity process with intercept.
pub fn sim_spec() -> MomentSpec {
    MomentSpec::gnr(true, false)
}

/// True parameters in the [`sim_spec`] layout
/// `(beta3, E, beta1, delta0, delta1)`.
pub fn true_theta(group: &GroupParams) -> ParamVector {
    ParamVector::from_vec(vec![
        group.gamma,
        group.e_factor(),
        group.beta(),
        group.alpha,
        group.delta,
    ])
}

/// Profit-maximizing intermediate input `(gamma exp(omega) E)^(1/beta) K`.
pub fn optimal_intermediate(omega: f64, k: f64, gamma: f64, beta: f64, e: f64) -> Result<f64> {
    if !(k > 0.0) {
        return Err(Error::Domain(format!("capital must be positive, got {k}")));
    }
    if !(gamma > 0.0 && gamma < 1.0 && beta > 0.0 && beta < 1.0 && e > 0.0) {
        return Err(Error::Domain("need gamma, beta in (0, 1) and E > 0".into()));
    }
    Ok((gamma * omega.exp() * e).powf(1.0 / beta) * k)
}

/// Precomputed terms of the investment series for one group.
///
/// Term `tau` is `coef[tau] * exp(slope[tau] * omega)` with
/// `coef[tau] = (b(1-d))^tau exp(alpha A_tau / beta + sigma_eta^2 B_tau / (2 beta^2))`,
/// `slope[tau] = delta^(tau+1) / beta`, and the geometric sums
/// `A_tau = sum_{s<=tau} delta^s`, `B_tau = sum_{s<=tau} delta^(2s)`.
#[derive(Debug, Clone)]
struct InvestmentSeries {
    factor: f64,
    coef: Vec<f64>,
    slope: Vec<f64>,
    /// `tail[tau] = sum_{s >= tau} coef[s]`, used once `exp` rounds to 1.
    tail: Vec<f64>,
}

fn geometric(r: f64, n: usize) -> f64 {
    // sum_{s=0}^{n-1} r^s
    if r == 1.0 {
        n as f64
    } else {
        (1.0 - r.powi(n as i32)) / (1.0 - r)
    }
}

impl InvestmentSeries {
    fn new(g: &GroupParams, b: f64, d: f64, terms: usize) -> Self {
        let beta = g.beta();
        let factor = b * beta * (g.gamma * g.e_factor()).powf(g.gamma / beta);
        let disc = b * (1.0 - d);
        let mut coef = Vec::with_capacity(terms);
        let mut slope = Vec::with_capacity(terms);
        for tau in 0..terms {
            let a = geometric(g.delta, tau + 1);
            let bb = geometric(g.delta * g.delta, tau + 1);
            let expo = g.alpha * a / beta + g.sigma_eta * g.sigma_eta * bb / (2.0 * beta * beta);
            coef.push(disc.powi(tau as i32) * expo.exp());
            slope.push(g.delta.powi(tau as i32 + 1) / beta);
        }
        let mut tail = vec![0.0; terms + 1];
        for tau in (0..terms).rev() {
            tail[tau] = tail[tau + 1] + coef[tau];
        }
        Self {
            factor,
            coef,
            slope,
            tail,
        }
    }

    /// Investment given productivity and the inverse adjustment cost.
    fn eval(&self, omega: f64, phi_inv: f64) -> f64 {
        let mut sum = 0.0;
        let mut tau = 0;
        while tau < self.coef.len() {
            let x = self.slope[tau] * omega;
            if x.abs() < 1e-17 {
                sum += self.tail[tau];
                break;
            }
            sum += self.coef[tau] * x.exp();
            tau += 1;
        }
        self.factor * phi_inv * sum
    }
}

/// Investment from the Euler-equation series truncated after `terms`
/// terms. `phi` is the adjustment-cost parameter.
pub fn optimal_investment(
    omega: f64,
    group: &GroupParams,
    phi: f64,
    b: f64,
    d: f64,
    terms: usize,
) -> Result<f64> {
    if !(b * (1.0 - d) < 1.0) {
        return Err(Error::Domain("investment series diverges: b (1 - d) >= 1".into()));
    }
    if terms == 0 || !(phi > 0.0) {
        return Err(Error::Domain("need at least one term and phi > 0".into()));
    }
    let beta = group.beta();
    let factor = b * beta * (group.gamma * group.e_factor()).powf(group.gamma / beta) / phi;
    let disc = b * (1.0 - d);
    let s2 = group.sigma_eta * group.sigma_eta;
    let mut sum = 0.0;
    for tau in 0..terms {
        let a = geometric(group.delta, tau + 1);
        let bb = geometric(group.delta * group.delta, tau + 1);
        let expo = (group.alpha * a + group.delta.powi(tau as i32 + 1) * omega) / beta
            + s2 * bb / (2.0 * beta * beta);
        sum += disc.powi(tau as i32) * expo.exp();
    }
    Ok(factor * sum)
}

/// Unobserved series of one firm over the kept periods.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub omega: Vec<f64>,
    pub eps: Vec<f64>,
    pub eta: Vec<f64>,
    /// Investment in levels.
    pub investment: Vec<f64>,
    /// Capital in levels.
    pub capital: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub panel: PanelData,
    /// 0-based group of every firm.
    pub groups: Vec<usize>,
    pub phi: Vec<f64>,
    pub latent: Vec<Latent>,
    pub config: SimConfig,
}

struct FirmDraw {
    vars: Vec<Vars>,
    phi: f64,
    latent: Latent,
}

fn simulate_firm(
    cfg: &SimConfig,
    g: &GroupParams,
    series: &InvestmentSeries,
    firm: usize,
    attempt: u64,
) -> Option<FirmDraw> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(firm as u64 | (attempt << 40));
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let phi_inv: f64 = normal().exp();
    let beta = g.beta();
    let ln_ge = g.gamma.ln() + g.e_factor().ln();
    let total = cfg.burn_in + cfg.t + 1;
    let kept = cfg.t + 1;

    let mut omega = g.stationary_mean() + cfg.initial_omega_offset + g.stationary_var().sqrt() * normal();
    let mut capital: f64 = 0.0;
    let mut latent = Latent {
        omega: Vec::with_capacity(kept),
        eps: Vec::with_capacity(kept),
        eta: Vec::with_capacity(kept),
        investment: Vec::with_capacity(kept),
        capital: Vec::with_capacity(kept),
    };
    let mut vars = Vec::with_capacity(kept);
    for t in 0..total {
        let eta = if t == 0 {
            0.0
        } else {
            let e = g.sigma_eta * normal();
            omega = g.alpha + g.delta * omega + e;
            e
        };
        let eps = g.sigma_eps * normal();
        let invest = series.eval(omega, phi_inv);
        if t >= cfg.burn_in {
            if !(capital > 0.0 && capital.is_finite() && invest.is_finite()) {
                return None;
            }
            let k = capital.ln();
            let m = (ln_ge + omega) / beta + k;
            let y = beta * k + g.gamma * m + omega + eps;
            vars.push(Vars {
                y,
                k,
                l: 0.0,
                m,
                s: m - y,
            });
            latent.omega.push(omega);
            latent.eps.push(eps);
            latent.eta.push(eta);
            latent.investment.push(invest);
            latent.capital.push(capital);
        }
        capital = (1.0 - cfg.d) * capital + invest;
    }
    Some(FirmDraw {
        vars,
        phi: 1.0 / phi_inv,
        latent,
    })
}

/// Simulates a panel. Periods are numbered `0..=T` after the burn-in;
/// firm ids are `1..=N`.
pub fn draw_panel(config: &SimConfig) -> Result<SimulatedPanel> {
    config.validate()?;
    let labels = config.group_labels();
    let series: Vec<InvestmentSeries> = config
        .groups
        .iter()
        .map(|g| InvestmentSeries::new(g, config.b, config.d, config.series_terms))
        .collect();
    let draws: Vec<Result<FirmDraw>> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &j)| {
            let g = &config.groups[j];
            simulate_firm(config, g, &series[j], i, 0)
                .or_else(|| simulate_firm(config, g, &series[j], i, 1))
                .ok_or_else(|| {
                    Error::Numerical(format!(
                        "firm {}: capital is not positive after the burn-in, even after \
                         redrawing its shocks (group {}, burn_in {})",
                        i + 1,
                        j + 1,
                        config.burn_in
                    ))
                })
        })
        .collect();

    let mut obs = Vec::with_capacity(config.n * (config.t + 1));
    let mut phi = Vec::with_capacity(config.n);
    let mut latent = Vec::with_capacity(config.n);
    for (i, d) in draws.into_iter().enumerate() {
        let d = d?;
        for (t, v) in d.vars.iter().enumerate() {
            obs.push(Observation {
                firm_id: (i + 1).to_string(),
                period: t as i64,
                vars: *v,
                extra: Vec::new(),
            });
        }
        phi.push(d.phi);
        latent.push(d.latent);
    }
    let panel = PanelData::from_observations(obs, Vec::new(), true, false)?;
    Ok(SimulatedPanel {
        panel,
        groups: labels,
        phi,
        latent,
        config: config.clone(),
    })
}

impl SimulatedPanel {
    /// True parameters of every firm in the [`sim_spec`] layout.
    pub fn firm_truth(&self) -> Vec<ParamVector> {
        self.groups
            .iter()
            .map(|&j| true_theta(&self.config.groups[j]))
            .collect()
    }

    /// `firm,group,phi` with 1-based groups.
    pub fn write_truth<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["firm", "group", "phi"])?;
        for (i, (&g, phi)) in self.groups.iter().zip(&self.phi).enumerate() {
            w.write_record([
                self.panel.firms()[i].id.clone(),
                (g + 1).to_string(),
                phi.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<truth csv>", e))?;
        Ok(())
    }

    /// `firm,period,omega,eps,eta,investment,capital`.
    pub fn write_latent<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["firm", "period", "omega", "eps", "eta", "investment", "capital"])?;
        for (f, lat) in self.panel.firms().iter().zip(&self.latent) {
            for t in 0..lat.omega.len() {
                w.write_record([
                    f.id.clone(),
                    (f.first_period + t as i64).to_string(),
                    lat.omega[t].to_string(),
                    lat.eps[t].to_string(),
                    lat.eta[t].to_string(),
                    lat.investment[t].to_string(),
                    lat.capital[t].to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<latent csv>", e))?;
        Ok(())
    }

    pub fn save(&self, panel: &Path, truth: &Path, latent: Option<&Path>) -> Result<()> {
        self.panel.save_csv(panel)?;
        let f = std::fs::File::create(truth).map_err(|e| Error::io(truth, e))?;
        self.write_truth(std::io::BufWriter::new(f))?;
        if let Some(p) = latent {
            let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            self.write_latent(std::io::BufWriter::new(f))?;
        }
        Ok(())
    }
}

/// Reads a `firm,group` ground-truth file into 0-based labels ordered
/// like the panel's firms.
pub fn read_truth(path: &Path, panel: &PanelData) -> Result<Vec<usize>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(f);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("truth file lacks a '{name}' column")))
    };
    let (fc, gc) = (col("firm")?, col("group")?);
    let mut map = std::collections::HashMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let g: usize = rec[gc].trim().parse().map_err(|_| Error::Parse {
            row: r + 2,
            msg: format!("group '{}' is not a positive integer", &rec[gc]),
        })?;
        if g == 0 {
            return Err(Error::Parse {
                row: r + 2,
                msg: "groups are numbered from 1".into(),
            });
        }
        map.insert(rec[fc].to_string(), g - 1);
    }
    panel
        .firms()
        .iter()
        .map(|f| {
            map.get(&f.id)
                .copied()
                .ok_or_else(|| Error::Schema(format!("firm {} missing from truth file", f.id)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, t: usize, seed: u64) -> SimConfig {
        SimConfig {
            n,
            t,
            burn_in: 200,
            seed,
            ..SimConfig::default()
        }
    }

    #[test]
    fn intermediate_closed_form() {
        let m = optimal_intermediate(2f64.ln(), 3.0, 0.5, 0.5, 1.0).unwrap();
        assert!((m - 3.0).abs() < 1e-14);
        let g = default_groups()[1];
        let ratio = optimal_intermediate(1.0, 1.0, 0.5, 0.5, g.e_factor()).unwrap();
        let expect = (0.5 * (1.0f64 + 0.0008).exp()).powi(2);
        assert!((ratio - expect).abs() < 1e-14);
        // 1.85022 to five digits
        assert!((ratio - 1.85022).abs() < 1e-5);
        assert!(optimal_intermediate(-30.0, 1.0, 0.5, 0.5, 1.0).unwrap() < 1e-20);
        assert!(optimal_intermediate(0.0, 0.0, 0.5, 0.5, 1.0).is_err());
    }

    #[test]
    fn investment_geometric_case() {
        let g = GroupParams {
            share: 1.0,
            gamma: 0.5,
            sigma_eps: 0.0,
            alpha: 0.0,
            delta: 0.0,
            sigma_eta: 0.0,
        };
        let i = optimal_investment(0.0, &g, 1.0, 0.985, 0.1, 1001).unwrap();
        let r: f64 = 0.985 * 0.9;
        let expect = 0.985 * 0.5 * 0.5 * (1.0 - r.powi(1001)) / (1.0 - r);
        assert!((i - expect).abs() < 1e-12 * expect);
        assert!((i - 2.1696).abs() < 1e-3);
    }

    #[test]
    fn investment_series_matches_direct_sum() {
        for g in default_groups() {
            let s = InvestmentSeries::new(&g, 0.985, 0.1, 1001);
            for omega in [-0.5, 0.0, g.stationary_mean(), 2.0] {
                let a = s.eval(omega, 1.7);
                let b = optimal_investment(omega, &g, 1.0 / 1.7, 0.985, 0.1, 1001).unwrap();
                assert!((a - b).abs() < 1e-13 * b, "{a} {b}");
            }
        }
    }

    #[test]
    fn investment_increases_in_omega() {
        for g in default_groups() {
            let lo = optimal_investment(0.0, &g, 1.0, 0.985, 0.1, 1001).unwrap();
            let hi = optimal_investment(1.0, &g, 1.0, 0.985, 0.1, 1001).unwrap();
            assert!(hi > lo);
        }
    }

    #[test]
    fn apportionment() {
        let mut c = SimConfig::default();
        assert_eq!(c.group_sizes(), vec![60, 80, 60]);
        c.n = 7;
        // quotas 2.1, 2.8, 2.1 -> 2, 3, 2
        assert_eq!(c.group_sizes(), vec![2, 3, 2]);
        c.n = 5;
        // quotas 1.5, 2.0, 1.5 -> tie on remainders goes to group 1
        assert_eq!(c.group_sizes(), vec![2, 2, 1]);
        assert_eq!(c.group_labels(), vec![0, 0, 1, 1, 2]);
    }

    #[test]
    fn config_validation() {
        let mut c = SimConfig::default();
        c.groups[0].share = 0.5;
        assert!(c.validate().is_err());
        let mut c = SimConfig::default();
        c.burn_in = 0;
        assert!(c.validate().is_err());
        let mut c = SimConfig::default();
        c.groups[2].delta = 1.0;
        assert!(c.validate().is_err());
        let c: SimConfig = serde_json::from_str(r#"{"n": 10, "t": 5}"#).unwrap();
        assert_eq!(c.groups.len(), 3);
        assert_eq!(c.burn_in, 1000);
    }

    #[test]
    fn true_parameters() {
        let g = default_groups();
        let t1 = true_theta(&g[0]);
        assert_eq!(t1.as_slice(), &[0.35, (0.0002f64).exp(), 0.65, 0.0, 0.9]);
        let t2 = true_theta(&g[1]);
        assert_eq!(t2.as_slice(), &[0.5, (0.0008f64).exp(), 0.5, 0.2, 0.8]);
        assert_eq!(sim_spec().param_names(), vec!["beta3", "E", "beta1", "delta0", "delta1"]);
    }

    #[test]
    fn identities_hold_on_every_row() {
        let sim = draw_panel(&small(12, 10, 3)).unwrap();
        assert_eq!(sim.panel.num_observations(), 12 * 11);
        for ((f, lat), &j) in sim.panel.firms().iter().zip(&sim.latent).zip(&sim.groups) {
            let g = &sim.config.groups[j];
            for (t, v) in f.vars.iter().enumerate() {
                assert_eq!(v.s, v.m - v.y);
                let recon = g.beta() * v.k + g.gamma * v.m + lat.omega[t] + lat.eps[t];
                assert!((v.y - recon).abs() < 1e-12);
                assert!((v.k - lat.capital[t].ln()).abs() < 1e-15);
                if t > 0 {
                    let k = (1.0 - sim.config.d) * lat.capital[t - 1] + lat.investment[t - 1];
                    assert_eq!(k, lat.capital[t]);
                    let w = g.alpha + g.delta * lat.omega[t - 1] + lat.eta[t];
                    assert!((w - lat.omega[t]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let cfg = small(9, 6, 11);
        let a = draw_panel(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| draw_panel(&cfg).unwrap());
        assert_eq!(a.panel, b.panel);
        let c = draw_panel(&SimConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.panel, c.panel);
    }

    #[test]
    fn noiseless_steady_state() {
        let mut cfg = small(6, 5, 1);
        for g in &mut cfg.groups {
            g.sigma_eps = 0.0;
            g.sigma_eta = 0.0;
        }
        let sim = draw_panel(&cfg).unwrap();
        for (lat, &j) in sim.latent.iter().zip(&sim.groups) {
            let mean = cfg.groups[j].stationary_mean();
            assert!(lat.eps.iter().all(|e| *e == 0.0));
            assert!(lat.eta.iter().all(|e| *e == 0.0));
            assert!(lat.omega.iter().all(|w| (w - mean).abs() < 1e-12));
        }
    }

    #[test]
    fn truth_file_round_trip() {
        let sim = draw_panel(&small(5, 3, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p, t, l) = (dir.path().join("p.csv"), dir.path().join("t.csv"), dir.path().join("l.csv"));
        sim.save(&p, &t, Some(&l)).unwrap();
        let back = read_truth(&t, &sim.panel).unwrap();
        assert_eq!(back, sim.groups);
        let text = std::fs::read_to_string(&l).unwrap();
        assert_eq!(text.lines().count(), 1 + 5 * 4);
    }
}
