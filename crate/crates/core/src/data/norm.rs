use std::ops::Range;

use factr_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::dataset::SeriesDataset;
use crate::error::{Error, Result};

const STD_FLOOR: f64 = 1e-8;

/// Per-channel z-score statistics fitted on the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Mean and biased standard deviation of each channel over `rows`.
    pub fn fit(ds: &SeriesDataset, rows: Range<usize>) -> Result<Self> {
        if rows.is_empty() || rows.end > ds.rows() {
            return Err(Error::Contract(format!(
                "normalization range {rows:?} invalid for {} rows",
                ds.rows()
            )));
        }
        let c = ds.channels();
        let n = rows.len() as f64;
        let data = ds.values.data();
        let mut mean = vec![0.0; c];
        for r in rows.clone() {
            for (m, v) in mean.iter_mut().zip(&data[r * c..(r + 1) * c]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(&data[r * c..(r + 1) * c]).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, ds: &SeriesDataset) -> SeriesDataset {
        self.transform(ds, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, ds: &SeriesDataset) -> SeriesDataset {
        self.transform(ds, |v, m, s| v * s + m)
    }

    fn transform(&self, ds: &SeriesDataset, f: impl Fn(f64, f64, f64) -> f64) -> SeriesDataset {
        let c = ds.channels();
        let data: Vec<f64> = ds
            .values
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.mean[i % c], self.std[i % c]))
            .collect();
        SeriesDataset {
            values: Tensor::new(ds.values.shape(), data).expect("same shape"),
            ..ds.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Frequency;

    fn dataset(rows: usize, c: usize, data: Vec<f64>) -> SeriesDataset {
        SeriesDataset::new(
            Tensor::new(&[rows, c], data).unwrap(),
            None,
            (0..c).map(|i| format!("c{i}")).collect(),
            Frequency::HOURLY,
        )
        .unwrap()
    }

    #[test]
    fn biased_std_oracle() {
        let ds = dataset(3, 2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let s = NormStats::fit(&ds, 0..3).unwrap();
        assert_eq!(s.mean, vec![2.0, 2.0]);
        // sqrt(((1-2)^2 + 0 + (3-2)^2) / 3) = sqrt(2/3)
        assert!((s.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((s.std[0] - 0.8165).abs() < 1e-4);
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let ds = dataset(4, 1, vec![5.0; 4]);
        let s = NormStats::fit(&ds, 0..4).unwrap();
        let z = s.apply(&ds);
        assert!(z.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fits_on_train_rows_only() {
        let ds = dataset(4, 1, vec![0.0, 2.0, 100.0, 100.0]);
        let s = NormStats::fit(&ds, 0..2).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.std, vec![1.0]);
        assert_eq!(s.apply(&ds).value(3, 0), 99.0);
    }

    #[test]
    fn roundtrip() {
        let ds = dataset(3, 2, vec![1.5, -3.0, 2.25, 7.0, 0.0, 1.0]);
        let s = NormStats::fit(&ds, 0..3).unwrap();
        let back = s.invert(&s.apply(&ds));
        assert!(back.values.max_abs_diff(&ds.values) < 1e-12);
    }
}
