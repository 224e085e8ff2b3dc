use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::dataset::Frequency;
use crate::error::{Error, Result};

/// How a series is cut into train / validation / test segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSpec {
    /// Parts of a whole; each split is floored, test takes the remainder.
    Ratio { train: f64, val: f64, test: f64 },
    /// Counts of 30-day months at the dataset frequency.
    Months { train: u32, val: u32, test: u32 },
}

impl SplitSpec {
    /// The ETT protocol: 12 / 4 / 4 months.
    pub fn ett() -> Self {
        SplitSpec::Months {
            train: 12,
            val: 4,
            test: 4,
        }
    }

    /// The 7:1:2 ratio used for the remaining datasets.
    pub fn standard_ratio() -> Self {
        SplitSpec::Ratio {
            train: 7.0,
            val: 1.0,
            test: 2.0,
        }
    }
}

/// Contiguous row ranges of the three segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRanges {
    /// Range of rows usable by windows of one segment: its own rows plus up
    /// to `lookback` rows of the segment before it, so that the first target
    /// can start at the segment border.
    pub fn with_lookback(&self, segment: &Range<usize>, lookback: usize) -> Range<usize> {
        segment.start.saturating_sub(lookback)..segment.end
    }

    pub fn train_windows(&self) -> Range<usize> {
        self.train.clone()
    }

    pub fn val_windows(&self, lookback: usize) -> Range<usize> {
        self.with_lookback(&self.val, lookback)
    }

    pub fn test_windows(&self, lookback: usize) -> Range<usize> {
        self.with_lookback(&self.test, lookback)
    }
}

/// Cuts `rows` rows into train / val / test.
pub fn chronological_split(rows: usize, frequency: Frequency, spec: &SplitSpec) -> Result<SplitRanges> {
    let (train, val, test) = match *spec {
        SplitSpec::Ratio { train, val, test } => {
            if [train, val, test].iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Config("split ratios must be finite and non-negative".into()));
            }
            let total = train + val + test;
            if total <= 0.0 {
                return Err(Error::Config("split ratios sum to zero".into()));
            }
            let n_train = (rows as f64 * train / total).floor() as usize;
            let n_val = (rows as f64 * val / total).floor() as usize;
            (n_train, n_val, rows - n_train - n_val)
        }
        SplitSpec::Months { train, val, test } => {
            let month = frequency.rows_per_days(30);
            let (a, b, c) = (train as usize * month, val as usize * month, test as usize * month);
            if a + b + c > rows {
                return Err(Error::Config(format!(
                    "month split needs {} rows, dataset has {rows}",
                    a + b + c
                )));
            }
            (a, b, c)
        }
    };
    for (name, len) in [("train", train), ("val", val), ("test", test)] {
        if len == 0 {
            return Err(Error::Config(format!("{name} split is empty")));
        }
    }
    Ok(SplitRanges {
        train: 0..train,
        val: train..train + val,
        test: train + val..train + val + test,
    })
}
