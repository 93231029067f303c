//! Aligned price panels: loading, validation, and return computation.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::MaskedMatrix;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("no security survived validation")]
    EmptyUniverse,
    #[error("invalid horizon {horizon} for a panel of {dates} dates")]
    InvalidHorizon { horizon: usize, dates: usize },
    #[error("inconsistent panel: {0}")]
    Inconsistent(String),
}

/// Dense `T×N` panel of prices, volumes, market caps and static industry codes.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel {
    pub dates: Vec<NaiveDate>,
    pub securities: Vec<String>,
    pub open: Array2<f64>,
    pub high: Array2<f64>,
    pub low: Array2<f64>,
    pub close: Array2<f64>,
    pub volume: Array2<f64>,
    pub market_cap: Array2<f64>,
    pub industry: Vec<u32>,
    pub mask: Array2<bool>,
}

/// Which end of the return interval a row is stamped with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Row `t` holds `close[t+h]/close[t] − 1`.
    Forward,
    /// Row `t` holds `close[t]/close[t−h] − 1`.
    Trailing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    pub returns: MaskedMatrix,
    pub horizon: usize,
    pub alignment: Alignment,
}

/// Loader options. Column names are fixed by the CSV schema.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadOptions {
    /// Securities with fewer valid days are dropped.
    pub min_history: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { min_history: 250 }
    }
}

const REQUIRED_COLUMNS: [&str; 9] = [
    "date",
    "security_id",
    "open",
    "high",
    "low",
    "close",
    "volume",
    "market_cap",
    "industry",
];

impl PricePanel {
    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_securities(&self) -> usize {
        self.securities.len()
    }

    /// Number of industries `J`; codes are in `0..J`.
    pub fn n_industries(&self) -> usize {
        self.industry.iter().max().map_or(0, |m| *m as usize + 1)
    }

    /// Close prices as a masked matrix.
    pub fn close_matrix(&self) -> MaskedMatrix {
        MaskedMatrix::new(self.close.clone(), self.mask.clone())
    }

    /// Checks every structural invariant of the panel.
    pub fn validate(&self) -> Result<(), PanelError> {
        let dim = (self.dates.len(), self.securities.len());
        for (name, m) in [
            ("open", &self.open),
            ("high", &self.high),
            ("low", &self.low),
            ("close", &self.close),
            ("volume", &self.volume),
            ("market_cap", &self.market_cap),
        ] {
            if m.dim() != dim {
                return Err(PanelError::Inconsistent(format!(
                    "{name} has shape {:?}, expected {dim:?}",
                    m.dim()
                )));
            }
        }
        if self.mask.dim() != dim {
            return Err(PanelError::Inconsistent("mask shape".into()));
        }
        if self.industry.len() != dim.1 {
            return Err(PanelError::Inconsistent("industry length".into()));
        }
        if self.dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PanelError::Inconsistent("dates not strictly increasing".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.securities.iter().all(|s| seen.insert(s)) {
            return Err(PanelError::Inconsistent("duplicate security id".into()));
        }
        for ((t, i), valid) in self.mask.indexed_iter() {
            if *valid
                && !(self.close[[t, i]] > 0.0
                    && self.volume[[t, i]] >= 0.0
                    && self.market_cap[[t, i]] > 0.0)
            {
                return Err(PanelError::Inconsistent(format!(
                    "invalid values at date {t}, security {i}"
                )));
            }
        }
        Ok(())
    }

    /// Keeps only the listed securities, in order.
    pub fn select_securities(&self, cols: &[usize]) -> Self {
        let sel = |m: &Array2<f64>| m.select(ndarray::Axis(1), cols);
        Self {
            dates: self.dates.clone(),
            securities: cols.iter().map(|&i| self.securities[i].clone()).collect(),
            open: sel(&self.open),
            high: sel(&self.high),
            low: sel(&self.low),
            close: sel(&self.close),
            volume: sel(&self.volume),
            market_cap: sel(&self.market_cap),
            industry: cols.iter().map(|&i| self.industry[i]).collect(),
            mask: self.mask.select(ndarray::Axis(1), cols),
        }
    }

    /// The first `n` dates.
    pub fn truncate_dates(&self, n: usize) -> Self {
        let n = n.min(self.n_dates());
        let cut = |m: &Array2<f64>| m.slice(ndarray::s![..n, ..]).to_owned();
        Self {
            dates: self.dates[..n].to_vec(),
            securities: self.securities.clone(),
            open: cut(&self.open),
            high: cut(&self.high),
            low: cut(&self.low),
            close: cut(&self.close),
            volume: cut(&self.volume),
            market_cap: cut(&self.market_cap),
            industry: self.industry.clone(),
            mask: self.mask.slice(ndarray::s![..n, ..]).to_owned(),
        }
    }

    pub fn date_index(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }
}

fn parse_field<T: std::str::FromStr>(raw: &str, line: u64, column: &str) -> Result<Option<T>, PanelError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse::<T>().map(Some).map_err(|_| PanelError::Parse {
        line,
        message: format!("column `{column}`: cannot parse `{raw}`"),
    })
}

/// Reads a panel CSV (see the crate README for the schema).
///
/// Rows with missing or invalid numeric fields become masked observations;
/// securities with fewer than `options.min_history` valid days are dropped.
pub fn load_panel(path: impl AsRef<Path>, options: &LoadOptions) -> Result<PricePanel, PanelError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| PanelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_panel(file, options)
}

/// [`load_panel`] over any reader.
pub fn read_panel<R: std::io::Read>(reader: R, options: &LoadOptions) -> Result<PricePanel, PanelError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| PanelError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut col = HashMap::new();
    for (idx, name) in headers.iter().enumerate() {
        let name = name.trim();
        if REQUIRED_COLUMNS.contains(&name) {
            col.insert(name.to_string(), idx);
        } else {
            log::warn!("ignoring unknown panel column `{name}`");
        }
    }
    for name in REQUIRED_COLUMNS {
        if !col.contains_key(name) {
            return Err(PanelError::Parse {
                line: 1,
                message: format!("missing required column `{name}`"),
            });
        }
    }

    struct Row {
        line: u64,
        date: NaiveDate,
        sec: usize,
        fields: [Option<f64>; 6],
        industry: Option<u32>,
    }
    let mut securities: Vec<String> = Vec::new();
    let mut sec_index: HashMap<String, usize> = HashMap::new();
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| PanelError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let get = |name: &str| record.get(col[name]).unwrap_or("");
        let date_raw = get("date").trim();
        let date = NaiveDate::parse_from_str(date_raw, "%Y-%m-%d").map_err(|_| PanelError::Parse {
            line,
            message: format!("invalid date `{date_raw}`"),
        })?;
        let id = get("security_id").trim();
        if id.is_empty() {
            return Err(PanelError::Parse {
                line,
                message: "empty security_id".into(),
            });
        }
        let sec = *sec_index.entry(id.to_string()).or_insert_with(|| {
            securities.push(id.to_string());
            securities.len() - 1
        });
        let mut fields = [None; 6];
        for (slot, name) in ["open", "high", "low", "close", "volume", "market_cap"].iter().enumerate() {
            let v: Option<f64> = parse_field(get(name), line, name)?;
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(PanelError::Parse {
                        line,
                        message: format!("column `{name}`: non-finite value"),
                    });
                }
            }
            fields[slot] = v;
        }
        let industry = parse_field::<u32>(get("industry"), line, "industry")?;
        rows.push(Row {
            line,
            date,
            sec,
            fields,
            industry,
        });
    }

    let mut dates: Vec<NaiveDate> = rows.iter().map(|r| r.date).collect();
    dates.sort_unstable();
    dates.dedup();
    let date_index: HashMap<NaiveDate, usize> = dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let (t_len, n_len) = (dates.len(), securities.len());
    let mut mats: Vec<Array2<f64>> = (0..6).map(|_| Array2::from_elem((t_len, n_len), f64::NAN)).collect();
    let mut mask = Array2::from_elem((t_len, n_len), false);
    let mut seen = Array2::from_elem((t_len, n_len), false);
    let mut industry: Vec<Option<u32>> = vec![None; n_len];

    for row in &rows {
        let t = date_index[&row.date];
        if seen[[t, row.sec]] {
            return Err(PanelError::Parse {
                line: row.line,
                message: format!("duplicate row for ({}, {})", row.date, securities[row.sec]),
            });
        }
        seen[[t, row.sec]] = true;
        if let Some(code) = row.industry {
            match industry[row.sec] {
                None => industry[row.sec] = Some(code),
                Some(prev) if prev != code => {
                    return Err(PanelError::Parse {
                        line: row.line,
                        message: format!(
                            "security `{}` changes industry from {prev} to {code}",
                            securities[row.sec]
                        ),
                    })
                }
                _ => {}
            }
        }
        for (slot, v) in row.fields.iter().enumerate() {
            if let Some(v) = v {
                mats[slot][[t, row.sec]] = *v;
            }
        }
        let [open, high, low, close, volume, mcap] = row.fields;
        let valid = row.industry.is_some()
            && open.is_some()
            && high.is_some()
            && low.is_some()
            && close.is_some_and(|c| c > 0.0)
            && volume.is_some_and(|v| v >= 0.0)
            && mcap.is_some_and(|m| m > 0.0);
        mask[[t, row.sec]] = valid;
    }

    let keep: Vec<usize> = (0..n_len)
        .filter(|&i| {
            let valid_days = mask.column(i).iter().filter(|m| **m).count();
            if valid_days < options.min_history {
                log::info!(
                    "dropping `{}`: {valid_days} valid days < {}",
                    securities[i],
                    options.min_history
                );
                return false;
            }
            true
        })
        .collect();
    if keep.is_empty() {
        return Err(PanelError::EmptyUniverse);
    }
    for &i in &keep {
        if industry[i].is_none() {
            return Err(PanelError::Inconsistent(format!(
                "security `{}` has no industry code",
                securities[i]
            )));
        }
    }
    let [open, high, low, close, volume, market_cap]: [Array2<f64>; 6] =
        mats.try_into().expect("six matrices");
    let full = PricePanel {
        dates,
        securities,
        open,
        high,
        low,
        close,
        volume,
        market_cap,
        industry: industry.iter().map(|c| c.unwrap_or(0)).collect(),
        mask,
    };
    let panel = full.select_securities(&keep);
    panel.validate()?;
    Ok(panel)
}

/// Writes every valid observation in the panel CSV schema.
///
/// Floats use Rust's shortest round-trip formatting, so reloading is bit-exact.
pub fn write_panel(panel: &PricePanel, path: impl AsRef<Path>) -> Result<(), PanelError> {
    let path = path.as_ref();
    let io_err = |source| PanelError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io_err)?);
    writeln!(out, "{}", REQUIRED_COLUMNS.join(",")).map_err(io_err)?;
    for (t, date) in panel.dates.iter().enumerate() {
        for (i, id) in panel.securities.iter().enumerate() {
            if !panel.mask[[t, i]] {
                continue;
            }
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                date.format("%Y-%m-%d"),
                id,
                panel.open[[t, i]],
                panel.high[[t, i]],
                panel.low[[t, i]],
                panel.close[[t, i]],
                panel.volume[[t, i]],
                panel.market_cap[[t, i]],
                panel.industry[i]
            )
            .map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

/// Simple returns over `horizon` days, stamped at the start of the interval.
///
/// The last `horizon` rows are entirely missing.
pub fn forward_returns(panel: &PricePanel, horizon: usize) -> Result<ReturnPanel, PanelError> {
    let t_len = panel.n_dates();
    if horizon == 0 || horizon >= t_len {
        return Err(PanelError::InvalidHorizon {
            horizon,
            dates: t_len,
        });
    }
    let n = panel.n_securities();
    let mut values = Array2::from_elem((t_len, n), f64::NAN);
    let mut mask = Array2::from_elem((t_len, n), false);
    for t in 0..t_len - horizon {
        for i in 0..n {
            if panel.mask[[t, i]] && panel.mask[[t + horizon, i]] {
                values[[t, i]] = panel.close[[t + horizon, i]] / panel.close[[t, i]] - 1.0;
                mask[[t, i]] = true;
            }
        }
    }
    Ok(ReturnPanel {
        returns: MaskedMatrix::new(values, mask),
        horizon,
        alignment: Alignment::Forward,
    })
}

/// One-day returns stamped at the end of the interval (row 0 is missing).
pub fn daily_returns(panel: &PricePanel) -> ReturnPanel {
    let (t_len, n) = (panel.n_dates(), panel.n_securities());
    let mut values = Array2::from_elem((t_len, n), f64::NAN);
    let mut mask = Array2::from_elem((t_len, n), false);
    for t in 1..t_len {
        for i in 0..n {
            if panel.mask[[t, i]] && panel.mask[[t - 1, i]] {
                values[[t, i]] = panel.close[[t, i]] / panel.close[[t - 1, i]] - 1.0;
                mask[[t, i]] = true;
            }
        }
    }
    ReturnPanel {
        returns: MaskedMatrix::new(values, mask),
        horizon: 1,
        alignment: Alignment::Trailing,
    }
}

/// Equal-weighted mean of valid trailing daily returns per date; NaN where none.
pub fn equal_weight_market_returns(panel: &PricePanel) -> Array1<f64> {
    let daily = daily_returns(panel);
    Array1::from_iter((0..panel.n_dates()).map(|t| {
        let row = daily.returns.valid_in_row(t);
        if row.is_empty() {
            f64::NAN
        } else {
            row.iter().map(|(_, r)| r).sum::<f64>() / row.len() as f64
        }
    }))
}

/// Validity mask with extreme daily moves removed.
///
/// An observation is dropped when its one-day return magnitude exceeds
/// `max_abs_daily_return`; the result is intersected with the panel mask.
pub fn universe_mask(panel: &PricePanel, max_abs_daily_return: f64) -> Array2<bool> {
    let daily = daily_returns(panel);
    let mut out = panel.mask.clone();
    for ((t, i), keep) in out.indexed_iter_mut() {
        if let Some(r) = daily.returns.get(t, i) {
            if r.abs() > max_abs_daily_return {
                *keep = false;
            }
        }
    }
    out
}
