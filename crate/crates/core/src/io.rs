//! Long-format factor files: `date,security_id,value`, one row per valid cell.

use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use ndarray::Array2;
use thiserror::Error;

use crate::factor::FactorPanel;
use crate::matrix::MaskedMatrix;

#[derive(Debug, Error)]
pub enum FactorIoError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn write_factor_csv<W: Write>(
    factor: &FactorPanel,
    dates: &[NaiveDate],
    securities: &[String],
    out: W,
) -> Result<(), FactorIoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "security_id", "value"])?;
    let (t_len, n) = factor.dim();
    for t in 0..t_len {
        for i in 0..n {
            if let Some(v) = factor.values.get(t, i) {
                w.write_record([dates[t].to_string(), securities[i].clone(), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a factor onto the panel grid `dates × securities`; cells not in
/// the file are missing. Unknown dates or securities are errors.
pub fn read_factor_csv<R: Read>(
    name: &str,
    dates: &[NaiveDate],
    securities: &[String],
    input: R,
) -> Result<FactorPanel, FactorIoError> {
    let date_ix: HashMap<NaiveDate, usize> = dates.iter().enumerate().map(|(k, d)| (*d, k)).collect();
    let sec_ix: HashMap<&str, usize> = securities.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
    let mut values = Array2::from_elem((dates.len(), securities.len()), f64::NAN);
    let mut mask = Array2::from_elem((dates.len(), securities.len()), false);
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != ["date", "security_id", "value"] {
        return Err(FactorIoError::Parse {
            line: 1,
            message: format!("expected header date,security_id,value, got {}", header.join(",")),
        });
    }
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let err = |message: String| FactorIoError::Parse { line, message };
        let d = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|e| err(format!("bad date `{}`: {e}", &rec[0])))?;
        let t = *date_ix.get(&d).ok_or_else(|| err(format!("date {d} not in the panel")))?;
        let i = *sec_ix.get(&rec[1]).ok_or_else(|| err(format!("security `{}` not in the panel", &rec[1])))?;
        let v: f64 = rec[2].parse().map_err(|_| err(format!("bad value `{}`", &rec[2])))?;
        if v.is_finite() {
            values[[t, i]] = v;
            mask[[t, i]] = true;
        }
    }
    Ok(FactorPanel::new(name, MaskedMatrix::new(values, mask), vec![format!("read({name})")]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dates = crate::synth::business_days(NaiveDate::from_ymd_opt(2021, 3, 1).unwrap(), 3);
        let secs = vec!["A".to_string(), "B".to_string()];
        let mut v = Array2::from_shape_fn((3, 2), |(t, i)| t as f64 * 0.1 - i as f64 / 3.0);
        v[[1, 0]] = f64::NAN;
        let f = FactorPanel::new("f", MaskedMatrix::from_values(v), vec![]);
        let mut buf = Vec::new();
        write_factor_csv(&f, &dates, &secs, &mut buf).unwrap();
        let back = read_factor_csv("f", &dates, &secs, buf.as_slice()).unwrap();
        assert_eq!(back.values, f.values);
    }

    #[test]
    fn unknown_security_is_reported_with_line() {
        let dates = vec![NaiveDate::from_ymd_opt(2021, 3, 1).unwrap()];
        let secs = vec!["A".to_string()];
        let text = "date,security_id,value\n2021-03-01,A,1\n2021-03-01,Z,2\n";
        match read_factor_csv("f", &dates, &secs, text.as_bytes()) {
            Err(FactorIoError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
