use std::ops::Range;

use factr_autodiff::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::calendar::Covariates;
use super::dataset::SeriesDataset;
use crate::error::{Error, Result};

/// One batch of aligned input/target windows.
#[derive(Debug, Clone)]
pub struct WindowBatch<F> {
    /// `[B, C, L]`
    pub inputs: Tensor<F>,
    /// `[B, C, T]`
    pub targets: Tensor<F>,
    /// Calendar codes `[B, 1, L, K]`, shared by all channels; empty when K = 0.
    pub dyn_covariates: Vec<usize>,
    pub features: usize,
    /// Row of the first input step of each window.
    pub window_starts: Vec<usize>,
}

impl<F> WindowBatch<F> {
    pub fn len(&self) -> usize {
        self.window_starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window_starts.is_empty()
    }

    pub fn covariate_shape(&self) -> [usize; 4] {
        let l = self.dyn_covariates.len() / (self.len() * self.features.max(1));
        [self.len(), 1, l, self.features]
    }
}

/// All stride-spaced windows of a row range whose inputs and targets fit
/// entirely inside it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Windows {
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
}

impl Windows {
    pub fn new(range: Range<usize>, lookback: usize, horizon: usize, stride: usize) -> Result<Self> {
        if stride == 0 || lookback == 0 || horizon == 0 {
            return Err(Error::Config("lookback, horizon and stride must be positive".into()));
        }
        let min = lookback + horizon;
        if range.len() < min {
            return Err(Error::Config(format!(
                "range of {} rows is too short for windows; minimum length is {min} (lookback {lookback} + horizon {horizon})",
                range.len()
            )));
        }
        Ok(Self {
            range,
            lookback,
            horizon,
            stride,
        })
    }

    pub fn len(&self) -> usize {
        (self.range.len() - self.lookback - self.horizon) / self.stride + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Start row of the `i`-th window.
    pub fn start(&self, i: usize) -> usize {
        self.range.start + i * self.stride
    }

    pub fn starts(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.start(i)).collect()
    }

    /// Window starts in a seeded random order.
    pub fn shuffled(&self, seed: u64) -> Vec<usize> {
        let mut order = self.starts();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }
}

/// Copies the windows starting at `starts` out of a dataset.
pub fn gather_batch<F: Real>(
    ds: &SeriesDataset,
    covariates: &Covariates,
    starts: &[usize],
    lookback: usize,
    horizon: usize,
) -> Result<WindowBatch<F>> {
    let (b, c) = (starts.len(), ds.channels());
    if b == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if let Some(&s) = starts.iter().find(|&&s| s + lookback + horizon > ds.rows()) {
        return Err(Error::Contract(format!("window at row {s} runs past the end of the series")));
    }
    let data = ds.values.data();
    let mut inputs = Vec::with_capacity(b * c * lookback);
    let mut targets = Vec::with_capacity(b * c * horizon);
    for &s in starts {
        for ch in 0..c {
            inputs.extend((s..s + lookback).map(|r| F::from_f64_lossy(data[r * c + ch])));
        }
        for ch in 0..c {
            let first = s + lookback;
            targets.extend((first..first + horizon).map(|r| F::from_f64_lossy(data[r * c + ch])));
        }
    }
    let features = covariates.features();
    let mut dyn_covariates = Vec::with_capacity(b * lookback * features);
    if features > 0 {
        for &s in starts {
            dyn_covariates.extend_from_slice(covariates.span(s, lookback));
        }
    }
    Ok(WindowBatch {
        inputs: Tensor::new(&[b, c, lookback], inputs)?,
        targets: Tensor::new(&[b, c, horizon], targets)?,
        dyn_covariates,
        features,
        window_starts: starts.to_vec(),
    })
}

/// Streams batches over a fixed window order.
pub struct WindowIter<'a, F> {
    ds: &'a SeriesDataset,
    covariates: &'a Covariates,
    order: Vec<usize>,
    lookback: usize,
    horizon: usize,
    batch: usize,
    pos: usize,
    _marker: std::marker::PhantomData<F>,
}

impl<'a, F: Real> WindowIter<'a, F> {
    /// Sequential order when `shuffle_seed` is `None`, seeded permutation
    /// otherwise. The last batch may be short; no window is dropped.
    pub fn new(
        ds: &'a SeriesDataset,
        covariates: &'a Covariates,
        windows: &Windows,
        batch: usize,
        shuffle_seed: Option<u64>,
    ) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if windows.range.end > ds.rows() {
            return Err(Error::Contract("window range exceeds dataset".into()));
        }
        let order = match shuffle_seed {
            Some(seed) => windows.shuffled(seed),
            None => windows.starts(),
        };
        Ok(Self {
            ds,
            covariates,
            order,
            lookback: windows.lookback,
            horizon: windows.horizon,
            batch,
            pos: 0,
            _marker: std::marker::PhantomData,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch)
    }
}

impl<F: Real> Iterator for WindowIter<'_, F> {
    type Item = Result<WindowBatch<F>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let starts = &self.order[self.pos..end];
        self.pos = end;
        Some(gather_batch(self.ds, self.covariates, starts, self.lookback, self.horizon))
    }
}
