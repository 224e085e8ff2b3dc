use factr_autodiff::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trainer::{fit, Objective, Task, TrainConfig, TrainOutcome};
use crate::data::PreparedData;
use crate::error::{Error, Result};
use crate::model::{is_head, Checkpoint, Factr, ModelConfig};

pub const PRETRAIN_EPOCHS: usize = 100;
pub const PROBE_EPOCHS: usize = 10;
pub const FINETUNE_EPOCHS: usize = 20;

/// Result of masked pretraining.
#[derive(Debug, Clone)]
pub struct Pretrained<F> {
    /// Full reconstruction model, head included.
    pub outcome: TrainOutcome<F>,
    /// Every tensor except the head.
    pub encoder: Checkpoint<F>,
}

/// Configuration of a reconstruction model: the head emits the lookback.
pub fn reconstruction_config(base: &ModelConfig) -> ModelConfig {
    ModelConfig {
        horizon: base.lookback,
        ..base.clone()
    }
}

/// Masked-patch pretraining for `cfg.max_epochs` epochs without early
/// stopping. The model's horizon must equal its lookback.
pub fn pretrain_masked<F: Real>(model: Factr<F>, data: &PreparedData, cfg: &TrainConfig) -> Result<Pretrained<F>> {
    let mc = model.config();
    if mc.horizon != mc.lookback {
        return Err(Error::Config(format!(
            "reconstruction head needs horizon == lookback ({}), got {}",
            mc.lookback, mc.horizon
        )));
    }
    if mc.truncate_front {
        return Err(Error::Config("masked pretraining needs lookback divisible by patch_len".into()));
    }
    let cfg = TrainConfig {
        objective: Objective::MaskedReconstruction,
        ..cfg.clone()
    };
    let outcome = fit(model, data, &cfg, Task::from_config(&cfg), |_| true, false)?;
    let encoder = Checkpoint::filtered(&outcome.model, |n| !is_head(n));
    Ok(Pretrained { outcome, encoder })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMode {
    /// Train a fresh head on the frozen encoder.
    Probe,
    /// Probe, then train every tensor.
    Finetune,
}

/// Model for `horizon` holding the encoder tensors and a freshly initialized
/// head.
pub fn attach_head<F: Real>(encoder: &Checkpoint<F>, horizon: usize, channels: usize, seed: u64) -> Result<Factr<F>> {
    if encoder.config.channels != channels {
        return Err(Error::Config(format!(
            "pretrained encoder has {} channels but the target dataset has {channels}; \
             re-initialize the channel-specific tensors (static.channel, static attributes, revin.*) \
             with a matching channel count before transfer",
            encoder.config.channels
        )));
    }
    let cfg = ModelConfig {
        horizon,
        ..encoder.config.clone()
    };
    let mut model = Factr::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    for name in names.iter().filter(|n| !is_head(n)) {
        let src = encoder
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("encoder checkpoint lacks '{name}'")))?;
        let dst = model.params_mut().get_mut(name).expect("listed above");
        if dst.shape() != src.shape() {
            return Err(Error::Checkpoint(format!(
                "encoder tensor '{name}' has shape {:?}, expected {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        *dst = src.clone();
    }
    Ok(model)
}

/// Transfer of a pretrained encoder to forecasting at `horizon`.
///
/// Probe trains only the head for [`PROBE_EPOCHS`]; finetune continues from
/// the probe with all tensors for [`FINETUNE_EPOCHS`]. Returns the final
/// model and the concatenated log.
pub fn transfer_train<F: Real>(
    encoder: &Checkpoint<F>,
    data: &PreparedData,
    horizon: usize,
    mode: TransferMode,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    let model = attach_head(encoder, horizon, data.channels(), cfg.seed)?;
    let stage = |epochs: usize| TrainConfig {
        objective: Objective::ForecastMse,
        max_epochs: epochs,
        patience: cfg.patience.min(epochs - 1),
        ..cfg.clone()
    };
    let probe = fit(model, data, &stage(PROBE_EPOCHS), Task::Forecast, is_head, false)?;
    if mode == TransferMode::Probe {
        return Ok(probe);
    }
    let mut tuned = fit(probe.model, data, &stage(FINETUNE_EPOCHS), Task::Forecast, |_| true, false)?;
    let offset = probe.log.epochs.len();
    let mut log = probe.log;
    for mut r in tuned.log.epochs {
        r.epoch += offset;
        log.epochs.push(r);
    }
    tuned.log = log;
    tuned.best_epoch += offset;
    Ok(tuned)
}
