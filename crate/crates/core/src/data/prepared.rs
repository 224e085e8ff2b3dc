use std::ops::Range;

use super::calendar::{calendar_covariates, Covariates};
use super::dataset::SeriesDataset;
use super::norm::NormStats;
use super::split::{chronological_split, SplitRanges, SplitSpec};
use super::window::Windows;
use crate::error::Result;

/// A z-scored series with its calendar covariates and split boundaries.
#[derive(Debug, Clone)]
pub struct PreparedData {
    /// Values standardized with the training-split statistics.
    pub dataset: SeriesDataset,
    pub covariates: Covariates,
    pub split: SplitRanges,
    pub norm: NormStats,
}

impl PreparedData {
    pub fn new(raw: &SeriesDataset, spec: &SplitSpec) -> Result<Self> {
        let split = chronological_split(raw.rows(), raw.frequency, spec)?;
        let norm = NormStats::fit(raw, split.train.clone())?;
        Ok(Self {
            dataset: norm.apply(raw),
            covariates: calendar_covariates(raw.timestamps.as_deref()),
            split,
            norm,
        })
    }

    pub fn channels(&self) -> usize {
        self.dataset.channels()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.dataset.channel_names
    }

    fn windows(&self, range: Range<usize>, lookback: usize, horizon: usize, stride: usize) -> Result<Windows> {
        Windows::new(range, lookback, horizon, stride)
    }

    pub fn train_windows(&self, lookback: usize, horizon: usize) -> Result<Windows> {
        self.windows(self.split.train_windows(), lookback, horizon, 1)
    }

    pub fn val_windows(&self, lookback: usize, horizon: usize) -> Result<Windows> {
        self.windows(self.split.val_windows(lookback), lookback, horizon, 1)
    }

    pub fn test_windows(&self, lookback: usize, horizon: usize) -> Result<Windows> {
        self.windows(self.split.test_windows(lookback), lookback, horizon, 1)
    }
}
