//! Firm panels in logs.
//!
//! A [`PanelData`] holds, per firm, a run of consecutive periods with log
//! output, capital, labor, intermediates and the log intermediate share.
//! Moment functions never look at a panel directly; they consume the
//! [`LaggedRow`]s produced by [`PanelData::build_lags`], where the first
//! period of each firm only supplies lags.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum number of observed periods per firm.
pub const MIN_PERIODS: usize = 3;

/// Log variables of one firm-period.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vars {
    pub y: f64,
    pub k: f64,
    pub l: f64,
    pub m: f64,
    pub s: f64,
}

impl Vars {
    fn all_finite(&self) -> bool {
        [self.y, self.k, self.l, self.m, self.s]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// One row of a panel as it comes in from a file or a simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub firm_id: String,
    pub period: i64,
    pub vars: Vars,
    /// Values of the panel's extra columns, in `PanelData::extra_names` order.
    pub extra: Vec<f64>,
}

/// The consecutive observations of a single firm.
#[derive(Debug, Clone, PartialEq)]
pub struct FirmSeries {
    pub id: String,
    pub first_period: i64,
    pub vars: Vec<Vars>,
    pub extra: Vec<Vec<f64>>,
}

impl FirmSeries {
    pub fn last_period(&self) -> i64 {
        self.first_period + self.vars.len() as i64 - 1
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Number of usable moment periods, `T_i - t_i`.
    pub fn usable_periods(&self) -> usize {
        self.vars.len().saturating_sub(1)
    }
}

/// Current and one-period-lagged values for one firm-period.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LaggedRow {
    pub period: i64,
    pub cur: Vars,
    pub lag: Vars,
}

/// Validated, immutable firm panel.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    firms: Vec<FirmSeries>,
    extra_names: Vec<String>,
    prices_normalized: bool,
    has_labor: bool,
}

impl PanelData {
    /// Builds a panel from loose observations. Firms keep the order of their
    /// first appearance; rows within a firm may come in any order.
    pub fn from_observations(
        observations: Vec<Observation>,
        extra_names: Vec<String>,
        prices_normalized: bool,
        has_labor: bool,
    ) -> Result<Self> {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut grouped: Vec<(String, Vec<Observation>)> = Vec::new();
        for obs in observations {
            if obs.extra.len() != extra_names.len() {
                return Err(Error::Shape(format!(
                    "firm {} period {}: {} extra values for {} extra columns",
                    obs.firm_id,
                    obs.period,
                    obs.extra.len(),
                    extra_names.len()
                )));
            }
            match index.get(&obs.firm_id) {
                Some(&i) => grouped[i].1.push(obs),
                None => {
                    index.insert(obs.firm_id.clone(), grouped.len());
                    grouped.push((obs.firm_id.clone(), vec![obs]));
                }
            }
        }
        if grouped.is_empty() {
            return Err(Error::EmptyPanel);
        }

        let mut firms = Vec::with_capacity(grouped.len());
        for (id, mut rows) in grouped {
            rows.sort_by_key(|o| o.period);
            for pair in rows.windows(2) {
                if pair[1].period == pair[0].period {
                    return Err(Error::DuplicatePeriod {
                        firm: id,
                        period: pair[0].period,
                    });
                }
                if pair[1].period != pair[0].period + 1 {
                    return Err(Error::Gap {
                        firm: id,
                        after: pair[0].period,
                    });
                }
            }
            if rows.len() < MIN_PERIODS {
                return Err(Error::TooShort {
                    firm: id,
                    count: rows.len(),
                });
            }
            for o in &rows {
                if !o.vars.all_finite() {
                    return Err(Error::Domain(format!(
                        "firm {} period {}: non-finite value",
                        id, o.period
                    )));
                }
                if prices_normalized {
                    let implied = o.vars.m - o.vars.y;
                    if (o.vars.s - implied).abs() > 1e-9 * (1.0 + implied.abs()) {
                        return Err(Error::Domain(format!(
                            "firm {} period {}: s = {} but m - y = {} with normalized prices",
                            id, o.period, o.vars.s, implied
                        )));
                    }
                }
            }
            firms.push(FirmSeries {
                id,
                first_period: rows[0].period,
                vars: rows.iter().map(|o| o.vars).collect(),
                extra: rows.into_iter().map(|o| o.extra).collect(),
            });
        }

        Ok(Self {
            firms,
            extra_names,
            prices_normalized,
            has_labor,
        })
    }

    pub fn firms(&self) -> &[FirmSeries] {
        &self.firms
    }

    pub fn num_firms(&self) -> usize {
        self.firms.len()
    }

    pub fn num_observations(&self) -> usize {
        self.firms.iter().map(FirmSeries::len).sum()
    }

    /// Total number of lagged rows, `sum_i (T_i - t_i)`.
    pub fn num_usable(&self) -> usize {
        self.firms.iter().map(FirmSeries::usable_periods).sum()
    }

    pub fn extra_names(&self) -> &[String] {
        &self.extra_names
    }

    pub fn extra_index(&self, name: &str) -> Option<usize> {
        self.extra_names.iter().position(|n| n == name)
    }

    pub fn prices_normalized(&self) -> bool {
        self.prices_normalized
    }

    pub fn has_labor(&self) -> bool {
        self.has_labor
    }

    pub fn is_balanced(&self) -> bool {
        let first = &self.firms[0];
        self.firms.iter().all(|f| {
            f.first_period == first.first_period && f.last_period() == first.last_period()
        })
    }

    /// Usable periods per firm; `T` when the panel is balanced.
    pub fn usable_lengths(&self) -> Vec<usize> {
        self.firms.iter().map(FirmSeries::usable_periods).collect()
    }

    /// Largest usable length, the `T` used for default tuning parameters.
    pub fn max_usable(&self) -> usize {
        self.usable_lengths().into_iter().max().unwrap_or(0)
    }

    /// One vector of lagged rows per firm, `T_i - t_i` rows each.
    pub fn build_lags(&self) -> Vec<Vec<LaggedRow>> {
        self.firms
            .iter()
            .map(|f| {
                f.vars
                    .windows(2)
                    .enumerate()
                    .map(|(t, w)| LaggedRow {
                        period: f.first_period + t as i64 + 1,
                        cur: w[1],
                        lag: w[0],
                    })
                    .collect()
            })
            .collect()
    }

    /// Keeps firms observed in every period of `[t0, t1]`, cut to that window.
    pub fn subset_balanced(&self, t0: i64, t1: i64) -> Result<PanelData> {
        if t0 >= t1 {
            return Err(Error::Config(format!(
                "window [{t0}, {t1}] is empty or reversed"
            )));
        }
        let firms: Vec<FirmSeries> = self
            .firms
            .iter()
            .filter(|f| f.first_period <= t0 && f.last_period() >= t1)
            .map(|f| {
                let a = (t0 - f.first_period) as usize;
                let b = (t1 - f.first_period) as usize + 1;
                FirmSeries {
                    id: f.id.clone(),
                    first_period: t0,
                    vars: f.vars[a..b].to_vec(),
                    extra: f.extra[a..b].to_vec(),
                }
            })
            .collect();
        if firms.is_empty() {
            return Err(Error::EmptyPanel);
        }
        if ((t1 - t0 + 1) as usize) < MIN_PERIODS {
            return Err(Error::TooShort {
                firm: firms[0].id.clone(),
                count: (t1 - t0 + 1) as usize,
            });
        }
        Ok(PanelData {
            firms,
            extra_names: self.extra_names.clone(),
            prices_normalized: self.prices_normalized,
            has_labor: self.has_labor,
        })
    }

    /// Keeps the listed firms (by position), in the given order.
    pub fn select_firms(&self, indices: &[usize]) -> Result<PanelData> {
        if indices.is_empty() {
            return Err(Error::EmptyPanel);
        }
        let firms = indices
            .iter()
            .map(|&i| {
                self.firms
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Shape(format!("firm index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PanelData {
            firms,
            extra_names: self.extra_names.clone(),
            prices_normalized: self.prices_normalized,
            has_labor: self.has_labor,
        })
    }

    pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<PanelData> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, schema)
    }

    pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<PanelData> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(schema.delimiter)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
        };
        let firm_c = col(&schema.firm)?;
        let period_c = col(&schema.period)?;
        let y_c = col(&schema.y)?;
        let k_c = col(&schema.k)?;
        let m_c = col(&schema.m)?;
        let l_c = schema.l.as_deref().map(col).transpose()?;
        let s_c = schema
            .s
            .as_deref()
            .and_then(|name| headers.iter().position(|h| h == name));
        if s_c.is_none() && !schema.prices_normalized {
            return Err(Error::Schema(format!(
                "column '{}' (log intermediate share) is missing and prices are not normalized; \
                 the share equation needs price-ratio data",
                schema.s.as_deref().unwrap_or("s")
            )));
        }
        let extra_c = schema
            .extra
            .iter()
            .map(|n| col(n))
            .collect::<Result<Vec<_>>>()?;

        let mut obs = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            // header is line 1
            let row = i + 2;
            let num = |c: usize, what: &str| -> Result<f64> {
                let raw = rec.get(c).unwrap_or("");
                let v: f64 = raw.parse().map_err(|_| Error::Parse {
                    row,
                    msg: format!("{what}: cannot parse '{raw}' as a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        msg: format!("{what}: non-finite value '{raw}'"),
                    });
                }
                Ok(v)
            };
            let period_raw = rec.get(period_c).unwrap_or("");
            let period: i64 = period_raw.parse().map_err(|_| Error::Parse {
                row,
                msg: format!("period: cannot parse '{period_raw}' as an integer"),
            })?;
            let y = num(y_c, "y")?;
            let m = num(m_c, "m")?;
            let vars = Vars {
                y,
                k: num(k_c, "k")?,
                l: match l_c {
                    Some(c) => num(c, "l")?,
                    None => 0.0,
                },
                m,
                s: match s_c {
                    Some(c) => num(c, "s")?,
                    None => m - y,
                },
            };
            let extra = extra_c
                .iter()
                .zip(&schema.extra)
                .map(|(&c, name)| num(c, name))
                .collect::<Result<Vec<_>>>()?;
            obs.push(Observation {
                firm_id: rec.get(firm_c).unwrap_or("").to_string(),
                period,
                vars,
                extra,
            });
        }
        PanelData::from_observations(
            obs,
            schema.extra.clone(),
            schema.prices_normalized,
            l_c.is_some(),
        )
    }

    /// Writes the panel in canonical column order
    /// `firm, period, y, k, [l,] m, s, extras...`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["firm", "period", "y", "k"];
        if self.has_labor {
            header.push("l");
        }
        header.extend(["m", "s"]);
        header.extend(self.extra_names.iter().map(String::as_str));
        wtr.write_record(&header)?;
        for f in &self.firms {
            for (t, (v, extra)) in f.vars.iter().zip(&f.extra).enumerate() {
                let mut rec = vec![
                    f.id.clone(),
                    (f.first_period + t as i64).to_string(),
                    v.y.to_string(),
                    v.k.to_string(),
                ];
                if self.has_labor {
                    rec.push(v.l.to_string());
                }
                rec.push(v.m.to_string());
                rec.push(v.s.to_string());
                rec.extend(extra.iter().map(|x| x.to_string()));
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Maps panel variables onto CSV column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub firm: String,
    pub period: String,
    pub y: String,
    pub k: String,
    /// `None` for two-input panels without labor.
    pub l: Option<String>,
    pub m: String,
    /// Share column; when it is absent from the file and prices are
    /// normalized, `s = m - y` is used.
    pub s: Option<String>,
    pub extra: Vec<String>,
    #[serde(with = "delimiter_serde")]
    pub delimiter: u8,
    pub prices_normalized: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            firm: "firm".into(),
            period: "period".into(),
            y: "y".into(),
            k: "k".into(),
            l: Some("l".into()),
            m: "m".into(),
            s: Some("s".into()),
            extra: Vec::new(),
            delimiter: b',',
            prices_normalized: false,
        }
    }
}

impl CsvSchema {
    pub fn without_labor(mut self) -> Self {
        self.l = None;
        self
    }

    /// Standard column names matched against a header: `l` and `s` are
    /// used when present, every other column is kept as an extra.
    pub fn infer(headers: &[&str]) -> Self {
        let has = |c: &str| headers.contains(&c);
        let known = ["firm", "period", "y", "k", "l", "m", "s"];
        Self {
            l: has("l").then(|| "l".to_string()),
            extra: headers
                .iter()
                .filter(|h| !known.contains(h))
                .map(|h| h.to_string())
                .collect(),
            ..Self::default()
        }
    }

    /// [`CsvSchema::infer`] on the header of a comma-separated file.
    pub fn infer_from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let headers = rdr.headers()?.clone();
        Ok(Self::infer(&headers.iter().collect::<Vec<_>>()))
    }

    pub fn with_extra(mut self, names: &[&str]) -> Self {
        self.extra = names.iter().map(|s| s.to_string()).collect();
        self
    }
}

mod delimiter_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &u8, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&(*d as char).to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u8, D::Error> {
        let s = String::deserialize(d)?;
        match s.as_bytes() {
            [b] => Ok(*b),
            _ => Err(serde::de::Error::custom("delimiter must be a single byte")),
        }
    }
}
