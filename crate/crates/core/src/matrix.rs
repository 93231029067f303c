//! Masked `T×N` matrices shared by every stage of the pipeline.
//!
//! Rows are dates, columns are securities. Missingness lives in an explicit
//! boolean mask; values under a false mask are stored as NaN and must never
//! be read.

use ndarray::{s, Array2, ArrayView1, Axis};

/// A dense `T×N` matrix with a validity mask of the same shape.
#[derive(Debug, Clone)]
pub struct MaskedMatrix {
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
}

/// Equal when masks agree and valid values compare equal.
impl PartialEq for MaskedMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.mask == other.mask
            && ndarray::Zip::from(&self.values)
                .and(&other.values)
                .and(&self.mask)
                .all(|a, b, &m| !m || a == b)
    }
}

impl MaskedMatrix {
    /// Builds a matrix, masking every non-finite value and blanking masked cells to NaN.
    pub fn new(mut values: Array2<f64>, mut mask: Array2<bool>) -> Self {
        assert_eq!(values.dim(), mask.dim(), "values and mask shapes differ");
        ndarray::Zip::from(&mut values).and(&mut mask).for_each(|v, m| {
            if !*m || !v.is_finite() {
                *m = false;
                *v = f64::NAN;
            }
        });
        Self { values, mask }
    }

    /// Every finite value is valid.
    pub fn from_values(values: Array2<f64>) -> Self {
        let mask = values.mapv(f64::is_finite);
        Self::new(values, mask)
    }

    pub fn missing(rows: usize, cols: usize) -> Self {
        Self {
            values: Array2::from_elem((rows, cols), f64::NAN),
            mask: Array2::from_elem((rows, cols), false),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        if self.mask[[t, i]] {
            Some(self.values[[t, i]])
        } else {
            None
        }
    }

    /// Rows `start..end` as an owned matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            values: self.values.slice(s![start..end, ..]).to_owned(),
            mask: self.mask.slice(s![start..end, ..]).to_owned(),
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Self) -> Self {
        assert_eq!(self.cols(), other.cols());
        Self {
            values: ndarray::concatenate(Axis(0), &[self.values.view(), other.values.view()])
                .expect("column counts agree"),
            mask: ndarray::concatenate(Axis(0), &[self.mask.view(), other.mask.view()])
                .expect("column counts agree"),
        }
    }

    /// Keeps only the listed columns, in the listed order.
    pub fn select_cols(&self, cols: &[usize]) -> Self {
        Self {
            values: self.values.select(Axis(1), cols),
            mask: self.mask.select(Axis(1), cols),
        }
    }

    /// Intersects the validity mask with `other`.
    pub fn and_mask(&self, other: &Array2<bool>) -> Self {
        let mask = &self.mask & other;
        Self::new(self.values.clone(), mask)
    }

    /// Valid `(column, value)` pairs of one row.
    pub fn valid_in_row(&self, t: usize) -> Vec<(usize, f64)> {
        valid_pairs(self.values.row(t), self.mask.row(t))
    }

    pub fn count_valid(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// True when both matrices agree on the mask and on every valid value bit-for-bit.
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.mask == other.mask
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .zip(self.mask.iter())
                .all(|((a, b), m)| !*m || a.to_bits() == b.to_bits())
    }
}

pub(crate) fn valid_pairs(values: ArrayView1<f64>, mask: ArrayView1<bool>) -> Vec<(usize, f64)> {
    values
        .iter()
        .zip(mask.iter())
        .enumerate()
        .filter(|(_, (_, m))| **m)
        .map(|(i, (v, _))| (i, *v))
        .collect()
}

/// Sample mean and standard deviation (`n − 1` denominator).
pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n as f64 - 1.0)).sqrt())
}

/// Pearson correlation, `None` when either side has zero variance.
pub(crate) fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
