//! Batched time-series and cross-sectional kernels.
//!
//! Rolling kernels are evaluated as a windowed pass over whole rows: output
//! row `t` is accumulated from input rows `t−w+1..=t`, all securities at once.
//! Each output depends only on the values inside its window, so evaluating a
//! panel in chunks (with the trailing `w−1` rows carried over) reproduces the
//! single-pass result bit for bit.

use ndarray::{Array1, Array2, ArrayViewMut1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::FactorError;
use crate::matrix::MaskedMatrix;

/// Statistic computed over a trailing window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RollingStat {
    Mean,
    Std,
    Min,
    Max,
    Sum,
}

impl RollingStat {
    pub fn name(self) -> &'static str {
        match self {
            RollingStat::Mean => "rolling_mean",
            RollingStat::Std => "rolling_std",
            RollingStat::Min => "rolling_min",
            RollingStat::Max => "rolling_max",
            RollingStat::Sum => "rolling_sum",
        }
    }
}

/// A single kernel application.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Kernel {
    Rolling { stat: RollingStat, window: usize },
    CrossRank { normalized: bool },
    Ewma { alpha: f64 },
    Lag { window: usize },
    Delta { window: usize },
}

impl Kernel {
    pub fn validate(&self) -> Result<(), FactorError> {
        match *self {
            Kernel::Rolling { window, .. } | Kernel::Lag { window } | Kernel::Delta { window } if window == 0 => {
                Err(FactorError::InvalidKernel(format!("{self:?}: window must be ≥ 1")))
            }
            Kernel::Ewma { alpha } if !(alpha > 0.0 && alpha <= 1.0) => {
                Err(FactorError::InvalidKernel(format!("ewma alpha {alpha} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }

    /// Rows of input history needed before the first row of a chunk.
    pub fn lookback(&self) -> usize {
        match *self {
            Kernel::Rolling { window, .. } => window - 1,
            Kernel::Lag { window } | Kernel::Delta { window } => window,
            Kernel::CrossRank { .. } | Kernel::Ewma { .. } => 0,
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            Kernel::Rolling { stat, window } => format!("{}({window})", stat.name()),
            Kernel::CrossRank { normalized: false } => "cross_rank".into(),
            Kernel::CrossRank { normalized: true } => "cross_rank_norm".into(),
            Kernel::Ewma { alpha } => format!("ewma({alpha})"),
            Kernel::Lag { window } => format!("lag({window})"),
            Kernel::Delta { window } => format!("delta({window})"),
        }
    }
}

/// Applies a rolling statistic to a full matrix.
///
/// Output is masked wherever the window holds fewer than `window` valid
/// observations, including the first `window − 1` rows.
pub fn rolling_apply(x: &MaskedMatrix, stat: RollingStat, window: usize) -> Result<MaskedMatrix, FactorError> {
    if window == 0 {
        return Err(FactorError::InvalidKernel("window must be ≥ 1".into()));
    }
    if window > x.rows() {
        return Err(FactorError::InvalidWindow {
            window,
            rows: x.rows(),
        });
    }
    Ok(rolling_with_history(None, x, stat, window))
}

/// Rolling pass where `history` (up to `window − 1` rows) precedes `input`.
pub(crate) fn rolling_with_history(
    history: Option<&MaskedMatrix>,
    input: &MaskedMatrix,
    stat: RollingStat,
    window: usize,
) -> MaskedMatrix {
    let combined = match history {
        Some(h) if h.rows() > 0 => h.vstack(input),
        _ => input.clone(),
    };
    let offset = combined.rows() - input.rows();
    let n = input.cols();
    let mut values = Array2::from_elem(input.dim(), f64::NAN);
    let mut mask = Array2::from_elem(input.dim(), false);
    values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(mask.axis_iter_mut(Axis(0)).into_par_iter())
        .enumerate()
        .for_each(|(r, (mut out, mut out_mask))| {
            let t = offset + r;
            if t + 1 < window {
                return;
            }
            let rows = (t + 1 - window)..=t;
            let mut valid = Array1::from_elem(n, true);
            for k in rows.clone() {
                valid.zip_mut_with(&combined.mask.row(k), |v, m| *v &= *m);
            }
            window_stat(&combined.values, rows, stat, window, &mut out);
            out_mask.assign(&valid);
        });
    MaskedMatrix::new(values, mask)
}

fn window_stat(
    values: &Array2<f64>,
    rows: std::ops::RangeInclusive<usize>,
    stat: RollingStat,
    window: usize,
    out: &mut ArrayViewMut1<f64>,
) {
    match stat {
        RollingStat::Sum | RollingStat::Mean => {
            out.fill(0.0);
            for k in rows {
                *out += &values.row(k);
            }
            if stat == RollingStat::Mean {
                out.mapv_inplace(|s| s / window as f64);
            }
        }
        RollingStat::Min | RollingStat::Max => {
            let first = *rows.start();
            out.assign(&values.row(first));
            for k in rows.skip(1) {
                out.zip_mut_with(&values.row(k), |acc, v| {
                    *acc = if stat == RollingStat::Min { acc.min(*v) } else { acc.max(*v) };
                    if v.is_nan() {
                        *acc = f64::NAN;
                    }
                });
            }
        }
        RollingStat::Std => {
            if window < 2 {
                out.fill(f64::NAN);
                return;
            }
            let mut mean = Array1::<f64>::zeros(out.len());
            for k in rows.clone() {
                mean += &values.row(k);
            }
            mean.mapv_inplace(|s| s / window as f64);
            out.fill(0.0);
            for k in rows {
                ndarray::Zip::from(&mut *out)
                    .and(&values.row(k))
                    .and(&mean)
                    .for_each(|acc, v, m| *acc += (v - m) * (v - m));
            }
            out.mapv_inplace(|ss| (ss / (window as f64 - 1.0)).sqrt());
        }
    }
}

/// Rolling sample covariance of two aligned matrices over `window` rows.
///
/// Both series must be valid throughout the window.
pub fn rolling_cov(x: &MaskedMatrix, y: &MaskedMatrix, window: usize) -> Result<MaskedMatrix, FactorError> {
    if window < 2 {
        return Err(FactorError::InvalidKernel("rolling covariance window must be ≥ 2".into()));
    }
    if window > x.rows() {
        return Err(FactorError::InvalidWindow {
            window,
            rows: x.rows(),
        });
    }
    Ok(rolling_cov_with_history(None, x, y, window))
}

pub(crate) fn rolling_cov_with_history(
    history: Option<(&MaskedMatrix, &MaskedMatrix)>,
    x: &MaskedMatrix,
    y: &MaskedMatrix,
    window: usize,
) -> MaskedMatrix {
    assert_eq!(x.dim(), y.dim());
    let (cx, cy) = match history {
        Some((hx, hy)) if hx.rows() > 0 => (hx.vstack(x), hy.vstack(y)),
        _ => (x.clone(), y.clone()),
    };
    let offset = cx.rows() - x.rows();
    let n = x.cols();
    let mut values = Array2::from_elem(x.dim(), f64::NAN);
    let mut mask = Array2::from_elem(x.dim(), false);
    values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(mask.axis_iter_mut(Axis(0)).into_par_iter())
        .enumerate()
        .for_each(|(r, (mut out, mut out_mask))| {
            let t = offset + r;
            if t + 1 < window {
                return;
            }
            let rows = (t + 1 - window)..=t;
            let mut valid = Array1::from_elem(n, true);
            let mut mx = Array1::<f64>::zeros(n);
            let mut my = Array1::<f64>::zeros(n);
            for k in rows.clone() {
                valid.zip_mut_with(&cx.mask.row(k), |v, m| *v &= *m);
                valid.zip_mut_with(&cy.mask.row(k), |v, m| *v &= *m);
                mx += &cx.values.row(k);
                my += &cy.values.row(k);
            }
            mx.mapv_inplace(|s| s / window as f64);
            my.mapv_inplace(|s| s / window as f64);
            out.fill(0.0);
            for k in rows {
                ndarray::Zip::from(&mut out)
                    .and(&cx.values.row(k))
                    .and(&cy.values.row(k))
                    .and(&mx)
                    .and(&my)
                    .for_each(|acc, a, b, ma, mb| *acc += (a - ma) * (b - mb));
            }
            out.mapv_inplace(|s| s / (window as f64 - 1.0));
            out_mask.assign(&valid);
        });
    MaskedMatrix::new(values, mask)
}

/// `x[t − window]`, or `x[t] − x[t − window]` when `difference` is set.
pub(crate) fn shift_with_history(
    history: Option<&MaskedMatrix>,
    input: &MaskedMatrix,
    window: usize,
    difference: bool,
) -> MaskedMatrix {
    let combined = match history {
        Some(h) if h.rows() > 0 => h.vstack(input),
        _ => input.clone(),
    };
    let offset = combined.rows() - input.rows();
    let mut values = Array2::from_elem(input.dim(), f64::NAN);
    let mut mask = Array2::from_elem(input.dim(), false);
    for r in 0..input.rows() {
        let t = offset + r;
        if t < window {
            continue;
        }
        let past = t - window;
        for i in 0..input.cols() {
            if combined.mask[[past, i]] && (!difference || combined.mask[[t, i]]) {
                values[[r, i]] = if difference {
                    combined.values[[t, i]] - combined.values[[past, i]]
                } else {
                    combined.values[[past, i]]
                };
                mask[[r, i]] = true;
            }
        }
    }
    MaskedMatrix::new(values, mask)
}

/// `x[t − window]`.
pub fn lag(x: &MaskedMatrix, window: usize) -> MaskedMatrix {
    shift_with_history(None, x, window, false)
}

/// `x[t] − x[t − window]`.
pub fn delta(x: &MaskedMatrix, window: usize) -> MaskedMatrix {
    shift_with_history(None, x, window, true)
}

/// Per-column recursion state of an exponentially weighted average.
#[derive(Debug, Clone, PartialEq)]
pub struct EwmaState {
    pub value: Vec<f64>,
    pub initialized: Vec<bool>,
}

impl EwmaState {
    pub fn new(cols: usize) -> Self {
        Self {
            value: vec![0.0; cols],
            initialized: vec![false; cols],
        }
    }
}

/// `EWMA[t] = α·x[t] + (1 − α)·EWMA[t−1]`, seeded with each column's first
/// valid observation. Masked inputs leave the state untouched and produce a
/// masked output.
pub fn ewma(x: &MaskedMatrix, alpha: f64) -> Result<MaskedMatrix, FactorError> {
    Kernel::Ewma { alpha }.validate()?;
    let mut state = EwmaState::new(x.cols());
    Ok(ewma_with_state(&mut state, x, alpha))
}

pub(crate) fn ewma_with_state(state: &mut EwmaState, x: &MaskedMatrix, alpha: f64) -> MaskedMatrix {
    let mut values = Array2::from_elem(x.dim(), f64::NAN);
    let mut mask = Array2::from_elem(x.dim(), false);
    for t in 0..x.rows() {
        for i in 0..x.cols() {
            if !x.mask[[t, i]] {
                continue;
            }
            let v = x.values[[t, i]];
            let s = if state.initialized[i] {
                alpha * v + (1.0 - alpha) * state.value[i]
            } else {
                state.initialized[i] = true;
                v
            };
            state.value[i] = s;
            values[[t, i]] = s;
            mask[[t, i]] = true;
        }
    }
    MaskedMatrix::new(values, mask)
}

/// Ranks of one cross-section: `1..=n_valid`, ties broken by column index.
///
/// This is the double argsort: a stable sort of valid columns by value,
/// followed by scattering positions back to columns.
pub fn rank_row(values: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].1.total_cmp(&values[b].1).then(values[a].0.cmp(&values[b].0)));
    let mut ranks = vec![(0usize, 0.0f64); values.len()];
    for (pos, &k) in order.iter().enumerate() {
        ranks[k] = (values[k].0, (pos + 1) as f64);
    }
    ranks
}

/// Cross-sectional ranks per date; with `normalized`, `(rank − 0.5)/n_valid`.
pub fn cross_rank(x: &MaskedMatrix, normalized: bool) -> MaskedMatrix {
    let mut values = Array2::from_elem(x.dim(), f64::NAN);
    values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(t, mut out)| {
            let row = x.valid_in_row(t);
            let n = row.len() as f64;
            for (i, rank) in rank_row(&row) {
                out[i] = if normalized { (rank - 0.5) / n } else { rank };
            }
        });
    MaskedMatrix::new(values, x.mask.clone())
}

/// Equal-weighted cross-sectional mean, broadcast to every column.
///
/// A row with no valid entry is masked everywhere.
pub fn cross_mean(x: &MaskedMatrix) -> MaskedMatrix {
    let (t_len, n) = x.dim();
    let mut values = Array2::from_elem((t_len, n), f64::NAN);
    let mut mask = Array2::from_elem((t_len, n), false);
    for t in 0..t_len {
        let row = x.valid_in_row(t);
        if row.is_empty() {
            continue;
        }
        let m = row.iter().map(|(_, v)| v).sum::<f64>() / row.len() as f64;
        values.row_mut(t).fill(m);
        mask.row_mut(t).fill(true);
    }
    MaskedMatrix::new(values, mask)
}

/// Elementwise binary operation; the output mask is the intersection of the
/// inputs and any non-finite result (e.g. division by zero) is masked.
pub fn combine(a: &MaskedMatrix, b: &MaskedMatrix, op: impl Fn(f64, f64) -> f64) -> MaskedMatrix {
    assert_eq!(a.dim(), b.dim());
    let mut values = a.values.clone();
    values.zip_mut_with(&b.values, |x, y| *x = op(*x, *y));
    MaskedMatrix::new(values, &a.mask & &b.mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn col(xs: &[f64]) -> MaskedMatrix {
        MaskedMatrix::from_values(Array2::from_shape_vec((xs.len(), 1), xs.to_vec()).unwrap())
    }

    fn column_values(m: &MaskedMatrix) -> Vec<Option<f64>> {
        (0..m.rows()).map(|t| m.get(t, 0)).collect()
    }

    #[test]
    fn rolling_mean_window_one_is_identity() {
        let x = col(&[1.0, -2.0, 3.5]);
        let y = rolling_apply(&x, RollingStat::Mean, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn rolling_sum_example() {
        let y = rolling_apply(&col(&[1.0, 2.0, 3.0, 4.0]), RollingStat::Sum, 2).unwrap();
        assert_eq!(column_values(&y), vec![None, Some(3.0), Some(5.0), Some(7.0)]);
    }

    #[test]
    fn rolling_window_larger_than_panel_errors() {
        assert!(matches!(
            rolling_apply(&col(&[1.0, 2.0]), RollingStat::Mean, 3),
            Err(FactorError::InvalidWindow { .. })
        ));
    }

    #[test]
    fn rolling_masks_partial_windows() {
        let mut x = col(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        x.mask[[2, 0]] = false;
        x.values[[2, 0]] = f64::NAN;
        let y = rolling_apply(&x, RollingStat::Max, 2).unwrap();
        assert_eq!(column_values(&y), vec![None, Some(2.0), None, None, Some(5.0)]);
    }

    #[test]
    fn rolling_std_two_pass() {
        let y = rolling_apply(&col(&[1e9 + 1.0, 1e9 + 2.0, 1e9 + 3.0]), RollingStat::Std, 3).unwrap();
        assert!((y.get(2, 0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_rank_examples() {
        let x = MaskedMatrix::from_values(array![[3.0, 1.0, 2.0], [5.0, 5.0, 1.0], [f64::NAN, 7.0, f64::NAN]]);
        let r = cross_rank(&x, false);
        assert_eq!(r.values.row(0).to_vec(), vec![3.0, 1.0, 2.0]);
        assert_eq!(r.values.row(1).to_vec(), vec![2.0, 3.0, 1.0]);
        assert_eq!(r.get(2, 1), Some(1.0));
        assert_eq!(r.get(2, 0), None);
        let n = cross_rank(&x, true);
        assert!((n.get(0, 0).unwrap() - 2.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ewma_examples() {
        let x = col(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(ewma(&x, 1.0).unwrap(), x);
        let y = ewma(&x, 0.5).unwrap();
        assert_eq!(column_values(&y), vec![Some(1.0), Some(0.5), Some(0.25), Some(0.125)]);
        let c = col(&[3.0; 5]);
        for v in column_values(&ewma(&c, 0.3).unwrap()) {
            assert!((v.unwrap() - 3.0).abs() < 1e-15);
        }
        assert!(ewma(&c, 0.0).is_err());
        assert!(ewma(&c, 1.5).is_err());
    }

    #[test]
    fn ewma_starts_at_first_valid_and_skips_gaps() {
        let mut x = col(&[9.0, 2.0, 9.0, 4.0]);
        x.mask[[0, 0]] = false;
        x.mask[[2, 0]] = false;
        let x = MaskedMatrix::new(x.values, x.mask);
        let y = ewma(&x, 0.5).unwrap();
        assert_eq!(column_values(&y), vec![None, Some(2.0), None, Some(3.0)]);
    }

    #[test]
    fn lag_and_delta() {
        let x = col(&[1.0, 4.0, 9.0]);
        assert_eq!(column_values(&lag(&x, 1)), vec![None, Some(1.0), Some(4.0)]);
        assert_eq!(column_values(&delta(&x, 2)), vec![None, None, Some(8.0)]);
    }

    #[test]
    fn division_by_zero_is_masked() {
        let a = col(&[1.0, 2.0]);
        let b = col(&[0.0, 4.0]);
        let q = combine(&a, &b, |x, y| x / y);
        assert_eq!(column_values(&q), vec![None, Some(0.5)]);
    }
}
