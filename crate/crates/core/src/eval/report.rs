use factr_autodiff::Real;
use serde::{Deserialize, Serialize};

use crate::data::{PreparedData, WindowIter, Windows};
use crate::error::{Error, Result};
use crate::model::{Batch, Factr};
use crate::train::batch_covariates;

/// Error units of a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Space {
    /// Training-split z-scores.
    #[default]
    Standardized,
    /// Original units of each channel.
    Raw,
}

/// Test-set errors, overall and broken down by channel and horizon step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub space: Space,
    pub mse: f64,
    pub mae: f64,
    pub channel_names: Vec<String>,
    pub channel_mse: Vec<f64>,
    pub channel_mae: Vec<f64>,
    pub horizon_mse: Vec<f64>,
    pub horizon_mae: Vec<f64>,
    pub windows: usize,
}

/// Accumulates squared and absolute errors in a fixed order.
#[derive(Debug, Clone)]
pub struct ErrorAccumulator {
    channels: usize,
    horizon: usize,
    sq: Vec<f64>,
    abs: Vec<f64>,
    windows: usize,
}

impl ErrorAccumulator {
    pub fn new(channels: usize, horizon: usize) -> Self {
        Self {
            channels,
            horizon,
            sq: vec![0.0; channels * horizon],
            abs: vec![0.0; channels * horizon],
            windows: 0,
        }
    }

    /// Adds `[B, C, T]` predictions and targets, scaling channel `c` errors
    /// by `scale[c]`.
    pub fn add(&mut self, pred: &[f64], target: &[f64], scale: &[f64]) -> Result<()> {
        let per = self.channels * self.horizon;
        if pred.len() != target.len() || !pred.len().is_multiple_of(per) {
            return Err(Error::Contract(format!(
                "{} predictions and {} targets do not form [B, {}, {}] batches",
                pred.len(),
                target.len(),
                self.channels,
                self.horizon
            )));
        }
        for (p, t) in pred.chunks(per).zip(target.chunks(per)) {
            for i in 0..per {
                let e = (p[i] - t[i]) * scale[i / self.horizon];
                self.sq[i] += e * e;
                self.abs[i] += e.abs();
            }
            self.windows += 1;
        }
        Ok(())
    }

    pub fn finish(self, channel_names: Vec<String>, space: Space) -> Result<ForecastReport> {
        if self.windows == 0 {
            return Err(Error::Contract("no windows to evaluate".into()));
        }
        let (c, t) = (self.channels, self.horizon);
        let w = self.windows as f64;
        let by_channel = |v: &[f64]| -> Vec<f64> {
            v.chunks(t).map(|row| row.iter().sum::<f64>() / (w * t as f64)).collect()
        };
        let by_step = |v: &[f64]| -> Vec<f64> {
            (0..t)
                .map(|s| (0..c).map(|ch| v[ch * t + s]).sum::<f64>() / (w * c as f64))
                .collect()
        };
        let total = |v: &[f64]| v.iter().sum::<f64>() / (w * (c * t) as f64);
        Ok(ForecastReport {
            space,
            mse: total(&self.sq),
            mae: total(&self.abs),
            channel_names,
            channel_mse: by_channel(&self.sq),
            channel_mae: by_channel(&self.abs),
            horizon_mse: by_step(&self.sq),
            horizon_mae: by_step(&self.abs),
            windows: self.windows,
        })
    }
}

/// Evaluates the model on every stride-1 test window.
pub fn evaluate<F: Real>(model: &Factr<F>, data: &PreparedData, eval_batch: usize, space: Space) -> Result<ForecastReport> {
    let cfg = model.config();
    let windows = data.test_windows(cfg.lookback, cfg.horizon)?;
    evaluate_windows(model, data, &windows, eval_batch, space)
}

/// Evaluates the model on an explicit window set.
pub fn evaluate_windows<F: Real>(
    model: &Factr<F>,
    data: &PreparedData,
    windows: &Windows,
    eval_batch: usize,
    space: Space,
) -> Result<ForecastReport> {
    crate::train::check_data(model, data)?;
    let cfg = model.config();
    let scale = match space {
        Space::Standardized => vec![1.0; cfg.channels],
        Space::Raw => data.norm.std.clone(),
    };
    let mut acc = ErrorAccumulator::new(cfg.channels, cfg.horizon);
    for batch in WindowIter::<F>::new(&data.dataset, &data.covariates, windows, eval_batch.max(1), None)? {
        let batch = batch?;
        let covariates = batch_covariates(model, &batch);
        let (pred, _) = model.predict(Batch {
            inputs: &batch.inputs,
            covariates,
        })?;
        acc.add(&pred.to_f64_vec(), &batch.targets.to_f64_vec(), &scale)?;
    }
    acc.finish(data.channel_names().to_vec(), space)
}

/// One row of the per-channel error ranking.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelError {
    pub rank: usize,
    pub channel: usize,
    pub name: String,
    pub mse: f64,
    pub mae: f64,
}

/// Channels by descending MSE; ties keep channel order.
pub fn per_channel_errors(report: &ForecastReport) -> Vec<ChannelError> {
    let mut order: Vec<usize> = (0..report.channel_mse.len()).collect();
    order.sort_by(|&a, &b| report.channel_mse[b].total_cmp(&report.channel_mse[a]));
    order
        .into_iter()
        .enumerate()
        .map(|(rank, c)| ChannelError {
            rank: rank + 1,
            channel: c,
            name: report.channel_names.get(c).cloned().unwrap_or_else(|| format!("ch{c}")),
            mse: report.channel_mse[c],
            mae: report.channel_mae[c],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(mse: Vec<f64>) -> ForecastReport {
        let names = (0..mse.len()).map(|c| format!("ch{c}")).collect();
        ForecastReport {
            space: Space::Standardized,
            mse: 0.0,
            mae: 0.0,
            channel_names: names,
            channel_mae: mse.clone(),
            channel_mse: mse,
            horizon_mse: vec![],
            horizon_mae: vec![],
            windows: 1,
        }
    }

    #[test]
    fn ranking_is_descending_and_stable() {
        let r = per_channel_errors(&report(vec![1.0, 4.0]));
        assert_eq!((r[0].channel, r[1].channel), (1, 0));
        let r = per_channel_errors(&report(vec![2.0; 4]));
        assert_eq!(r.iter().map(|e| e.channel).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn hand_built_residuals() {
        // Channel 0 residual 2 everywhere, channel 1 residual 1.
        let mut acc = ErrorAccumulator::new(2, 3);
        let target = vec![0.0; 6];
        let pred = vec![2.0, -2.0, 2.0, 1.0, 1.0, -1.0];
        acc.add(&pred, &target, &[1.0, 1.0]).unwrap();
        let rep = acc.finish(vec!["a".into(), "b".into()], Space::Standardized).unwrap();
        assert_eq!(rep.channel_mse, vec![4.0, 1.0]);
        assert_eq!(rep.channel_mae, vec![2.0, 1.0]);
        assert_eq!(rep.mse, 2.5);
        assert_eq!(rep.horizon_mse, vec![2.5, 2.5, 2.5]);
        let ranked = per_channel_errors(&rep);
        assert_eq!(ranked[0].name, "a");
    }

    #[test]
    fn empty_stream_is_an_error() {
        assert!(ErrorAccumulator::new(1, 1).finish(vec![], Space::Raw).is_err());
    }
}
