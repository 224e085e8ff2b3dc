use std::fmt::Write as _;
use std::time::Instant;

use factr_autodiff::{Real, Tape, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{sam_step, AdamConfig, Grads, OptState};
use super::schedule::cosine_warm_restart_lr;
use crate::data::{gather_batch, mask_patches, PreparedData, WindowBatch, WindowIter, Windows};
use crate::error::{Error, Result};
use crate::model::{Batch, Factr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    ForecastMse,
    MaskedReconstruction,
}

/// Warm-restart schedule shape; the peak rate is [`TrainConfig::lr`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scheduler {
    pub period: usize,
    pub mult: usize,
    pub lr_min: f64,
}

impl Default for Scheduler {
    fn default() -> Self {
        Self {
            period: 10,
            mult: 2,
            lr_min: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub rho: f64,
    pub batch: usize,
    pub eval_batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub scheduler: Scheduler,
    pub seed: u64,
    pub objective: Objective,
    pub mask_ratio: f64,
    /// Reconstruction loss over masked patches only instead of the whole
    /// window.
    pub masked_only: bool,
    /// Spacing between consecutive training windows.
    pub train_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            rho: 0.0,
            batch: 32,
            eval_batch: 128,
            max_epochs: 150,
            patience: 10,
            scheduler: Scheduler::default(),
            seed: 0,
            objective: Objective::ForecastMse,
            mask_ratio: 0.45,
            masked_only: false,
            train_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be non-negative, got {}", self.rho));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.adam_eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad("adam_eps must be positive".into());
        }
        if self.batch == 0 || self.eval_batch == 0 || self.train_stride == 0 {
            return bad("batch, eval_batch and train_stride must be positive".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.patience >= self.max_epochs {
            return bad(format!(
                "patience ({}) must be smaller than max_epochs ({})",
                self.patience, self.max_epochs
            ));
        }
        if self.scheduler.period == 0 || self.scheduler.mult == 0 {
            return bad("scheduler period and mult must be at least 1".into());
        }
        if !(self.scheduler.lr_min >= 0.0 && self.scheduler.lr_min <= self.lr) {
            return bad("scheduler lr_min must lie in [0, lr]".into());
        }
        if self.objective == Objective::MaskedReconstruction && !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio must lie in (0, 1), got {}", self.mask_ratio));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let s = self.scheduler;
        cosine_warm_restart_lr(epoch, s.period, s.mult, self.lr, s.lr_min)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.adam_eps,
        }
    }
}

/// Patience counter over a stream of validation losses.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Records a loss; returns whether it is a new best.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
            true
        } else {
            self.wait += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.wait >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch\ttrain_loss\tval_loss\tlr\tseconds";

    /// Tab-separated table with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.3}",
                r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds
            );
        }
        out
    }

    /// The table without the wall-clock column, for run-to-run comparison.
    pub fn deterministic_tsv(&self) -> String {
        self.to_tsv()
            .lines()
            .map(|l| l.rsplit_once('\t').map_or(l, |(head, _)| head))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
    }
}

/// Best-validation model and the per-epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub model: Factr<F>,
    pub log: TrainLog,
    /// 1-based epoch of the returned parameters.
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Seed of an independent stream for `(epoch, purpose)`.
fn sub_seed(seed: u64, epoch: usize, purpose: u64) -> u64 {
    let mut x = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ purpose.wrapping_mul(0xD1B5_4A32_D192_ED69);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

const SHUFFLE: u64 = 1;
const DROPOUT: u64 = 2;
const MASK: u64 = 3;
const VAL_MASK: u64 = 4;

#[derive(Debug, Clone, Copy)]
pub(crate) enum Task {
    Forecast,
    Reconstruct { ratio: f64, masked_only: bool },
}

impl Task {
    pub(crate) fn from_config(cfg: &TrainConfig) -> Self {
        match cfg.objective {
            Objective::ForecastMse => Task::Forecast,
            Objective::MaskedReconstruction => Task::Reconstruct {
                ratio: cfg.mask_ratio,
                masked_only: cfg.masked_only,
            },
        }
    }

    /// Target horizon of the windows this task consumes.
    fn window_horizon<F: Real>(self, model: &Factr<F>) -> usize {
        match self {
            Task::Forecast => model.config().horizon,
            Task::Reconstruct { .. } => 1,
        }
    }
}

/// Covariate codes in the layout the model expects.
pub(crate) fn batch_covariates<'a, F: Real, G>(model: &Factr<F>, batch: &'a WindowBatch<G>) -> &'a [usize] {
    if model.config().dyn_features() > 0 {
        &batch.dyn_covariates
    } else {
        &[]
    }
}

pub(crate) fn check_data<F: Real>(model: &Factr<F>, data: &PreparedData) -> Result<()> {
    let cfg = model.config();
    if cfg.channels != data.channels() {
        return Err(Error::Config(format!(
            "model expects {} channels, dataset has {}",
            cfg.channels,
            data.channels()
        )));
    }
    if cfg.dyn_features() > 0 && data.covariates.cardinalities() != cfg.dyn_cardinalities.as_slice() {
        return Err(Error::Config(format!(
            "model dynamic covariates {:?} do not match the dataset's {:?}; timestamps are required for calendar features",
            cfg.dyn_cardinalities,
            data.covariates.cardinalities()
        )));
    }
    Ok(())
}

fn nan_abort(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss { epoch, batch },
        other => other,
    }
}

/// Builds the loss of one batch on `tape`. Returns the loss variable.
fn batch_loss<F: Real>(
    model: &Factr<F>,
    tape: &mut Tape<F>,
    vars: &[Var],
    batch: &WindowBatch<F>,
    task: Task,
    mask_rng: &mut ChaCha8Rng,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let covariates = batch_covariates(model, batch);
    match task {
        Task::Forecast => {
            let out = model.forward(tape, vars, Batch { inputs: &batch.inputs, covariates }, dropout)?;
            let target = tape.constant(batch.targets.clone());
            Ok(tape.mse(out.forecast, target)?)
        }
        Task::Reconstruct { ratio, masked_only } => {
            let masked = mask_patches(&batch.inputs, model.config().patch_len, ratio, mask_rng)?;
            let out = model.forward(tape, vars, Batch { inputs: &masked.inputs, covariates }, dropout)?;
            let target = tape.constant(batch.inputs.clone());
            if !masked_only {
                return Ok(tape.mse(out.forecast, target)?);
            }
            let weights = masked.step_weights(model.config().patch_len);
            let count = weights.data().iter().filter(|w| **w != F::zero()).count().max(1);
            let w = tape.constant(weights);
            let diff = tape.sub(out.forecast, target)?;
            let sq = tape.mul(diff, diff)?;
            let kept = tape.mul(sq, w)?;
            let total = tape.sum(kept)?;
            Ok(tape.scale(total, F::from_f64_lossy(1.0 / count as f64))?)
        }
    }
}

/// Loss and gradients of one batch at the model's current parameters.
fn loss_and_grads<F: Real>(
    model: &Factr<F>,
    trainable: &[bool],
    batch: &WindowBatch<F>,
    task: Task,
    mask_rng: &mut ChaCha8Rng,
    dropout: &mut ChaCha8Rng,
) -> Result<(f64, Grads<F>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = model
        .params()
        .iter()
        .zip(trainable)
        .map(|((_, t), &grad)| tape.leaf(t.clone(), grad))
        .collect();
    let loss = batch_loss(model, &mut tape, &vars, batch, task, mask_rng, Some(dropout))?;
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::Tensor(TensorError::NonFinite { op: "loss", index: 0 }));
    }
    let mut grads = tape.backward(loss)?;
    let out = vars.iter().zip(trainable).map(|(&v, &t)| if t { grads.take(v) } else { None }).collect();
    Ok((value, out))
}

/// Mean loss of `task` over every window, without dropout.
pub(crate) fn mean_loss<F: Real>(
    model: &Factr<F>,
    data: &PreparedData,
    windows: &Windows,
    task: Task,
    eval_batch: usize,
    mask_seed: u64,
) -> Result<f64> {
    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let (mut total, mut count) = (0.0, 0usize);
    for batch in WindowIter::<F>::new(&data.dataset, &data.covariates, windows, eval_batch, None)? {
        let batch = batch?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, |_| false);
        let loss = batch_loss(model, &mut tape, &vars, &batch, task, &mut mask_rng, None)?;
        total += tape.value(loss).item().as_f64() * batch.len() as f64;
        count += batch.len();
    }
    Ok(total / count as f64)
}

/// Supervised forecasting or masked pretraining, per `cfg.objective`, with
/// every parameter trainable.
pub fn train<F: Real>(model: Factr<F>, data: &PreparedData, cfg: &TrainConfig) -> Result<TrainOutcome<F>> {
    fit(model, data, cfg, Task::from_config(cfg), |_| true, true)
}

/// The training loop: SAM steps over shuffled windows, validation after each
/// epoch, early stopping on the validation loss.
pub(crate) fn fit<F: Real>(
    mut model: Factr<F>,
    data: &PreparedData,
    cfg: &TrainConfig,
    task: Task,
    trainable: impl Fn(&str) -> bool,
    stop_early: bool,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    check_data(&model, data)?;
    let (lookback, horizon) = (model.config().lookback, task.window_horizon(&model));
    let train_windows = Windows::new(data.split.train_windows(), lookback, horizon, cfg.train_stride)?;
    let val_windows = data.val_windows(lookback, horizon)?;
    let mask: Vec<bool> = model.params().names().map(&trainable).collect();
    let mut state = OptState::new(model.params(), cfg.adam());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params().clone();
    let mut best_epoch = 0;
    let mut log = TrainLog::default();

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut dropout = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, epoch, DROPOUT));
        let batches = WindowIter::<F>::new(
            &data.dataset,
            &data.covariates,
            &train_windows,
            cfg.batch,
            Some(sub_seed(cfg.seed, epoch, SHUFFLE)),
        )?;
        let (mut total, mut seen) = (0.0, 0usize);
        for (index, batch) in batches.enumerate() {
            let batch = batch?;
            // Both SAM passes see the same mask.
            let mask_seed = sub_seed(cfg.seed ^ index as u64, epoch, MASK);
            let outcome = sam_step(
                &mut model,
                &mask,
                |m: &Factr<F>| {
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                    loss_and_grads(m, &mask, &batch, task, &mut mask_rng, &mut dropout)
                },
                cfg.rho,
                &mut state,
                lr,
            )
            .map_err(|e| nan_abort(e, epoch + 1, index))?;
            total += outcome.loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = total / seen as f64;
        let val_loss = mean_loss(&model, data, &val_windows, task, cfg.eval_batch, sub_seed(cfg.seed, 0, VAL_MASK))?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: epoch + 1, batch: 0 });
        }
        if stopper.observe(val_loss) {
            best = model.params().clone();
            best_epoch = epoch + 1;
        }
        log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        if stop_early && stopper.should_stop() {
            break;
        }
    }
    *model.params_mut() = best;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val: stopper.best,
    })
}

/// Gathers the windows at `starts` as one batch.
pub fn window_batch<F: Real>(data: &PreparedData, starts: &[usize], lookback: usize, horizon: usize) -> Result<WindowBatch<F>> {
    gather_batch(&data.dataset, &data.covariates, starts, lookback, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_one_stops_after_first_worse_epoch() {
        let mut s = EarlyStopping::new(1);
        let mut stopped_at = None;
        for (i, loss) in [1.0, 2.0, 3.0, 4.0].into_iter().enumerate() {
            s.observe(loss);
            if s.should_stop() {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(2));
        assert_eq!(s.best, 1.0);
    }

    #[test]
    fn tsv_has_five_columns() {
        let log = TrainLog {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                lr: 1e-4,
                seconds: 1.5,
            }],
        };
        let tsv = log.to_tsv();
        assert!(tsv.starts_with(TrainLog::HEADER));
        assert!(tsv.lines().all(|l| l.split('\t').count() == 5));
        assert!(log.deterministic_tsv().lines().all(|l| l.split('\t').count() == 4));
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let cfg = TrainConfig {
            patience: 150,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            rho: -0.1,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sub_seeds_differ_by_purpose_and_epoch() {
        let a = sub_seed(7, 0, SHUFFLE);
        assert_ne!(a, sub_seed(7, 0, DROPOUT));
        assert_ne!(a, sub_seed(7, 1, SHUFFLE));
        assert_eq!(a, sub_seed(7, 0, SHUFFLE));
    }
}
